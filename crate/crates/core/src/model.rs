//! Model containers, simulation and system generators.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, condition_number, is_symmetric, psd_factor, spectral_radius};
use crate::{LgssError, Result};

/// Matrices serialised as a list of rows.
mod rows {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}

mod vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::deserialize(d)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub nx: usize,
    pub nu: usize,
    pub ny: usize,
    pub nw: usize,
}

/// `x_{t+1} = A x_t + B u_t + G w_t`, `y_t = C x_t + D u_t + v_t`,
/// `x_1 ~ N(mu, Sigma1)`, `w_t ~ N(0, Sigma_w)`, `v_t ~ N(0, Sigma_v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplicitModel {
    #[serde(with = "vector")]
    pub mu: DVector<f64>,
    #[serde(rename = "Sigma1", with = "rows")]
    pub sigma1: DMatrix<f64>,
    #[serde(rename = "Sigma_w", with = "rows")]
    pub sigma_w: DMatrix<f64>,
    #[serde(rename = "Sigma_v", with = "rows")]
    pub sigma_v: DMatrix<f64>,
    #[serde(rename = "A", with = "rows")]
    pub a: DMatrix<f64>,
    #[serde(rename = "B", with = "rows")]
    pub b: DMatrix<f64>,
    #[serde(rename = "G", with = "rows")]
    pub g: DMatrix<f64>,
    #[serde(rename = "C", with = "rows")]
    pub c: DMatrix<f64>,
    #[serde(rename = "D", with = "rows")]
    pub d: DMatrix<f64>,
}

/// The part of the parameters updated by the constrained M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub sigma_v: DMatrix<f64>,
}

/// `E x_{t+1} = F x_t + K u_t + L w_t`; `P` is carried along as a stability certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitModel {
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub sigma_v: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

/// Signals stored column-per-time-step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub x: Option<DMatrix<f64>>,
    pub w: Option<DMatrix<f64>>,
    pub v: Option<DMatrix<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.y.ncols()
    }
}

fn shape(m: &DMatrix<f64>, r: usize, c: usize, what: &str) -> Result<()> {
    if m.nrows() != r || m.ncols() != c {
        return Err(LgssError::DimensionMismatch(format!(
            "{what} is {}x{}, expected {r}x{c}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LgssError::InvalidModel(format!("{what} has non-finite entries")));
    }
    Ok(())
}

impl ExplicitModel {
    pub fn dims(&self) -> Dimensions {
        Dimensions { nx: self.a.nrows(), nu: self.b.ncols(), ny: self.c.nrows(), nw: self.g.ncols() }
    }

    /// Shapes, symmetry and positive semidefiniteness of the covariances.
    pub fn validate(&self) -> Result<Dimensions> {
        let d = self.dims();
        if d.nx == 0 || d.ny == 0 {
            return Err(LgssError::DimensionMismatch("state and output dimensions must be positive".into()));
        }
        shape(&DMatrix::from_column_slice(self.mu.len(), 1, self.mu.as_slice()), d.nx, 1, "mu")?;
        shape(&self.a, d.nx, d.nx, "A")?;
        shape(&self.b, d.nx, d.nu, "B")?;
        shape(&self.g, d.nx, d.nw, "G")?;
        shape(&self.c, d.ny, d.nx, "C")?;
        shape(&self.d, d.ny, d.nu, "D")?;
        shape(&self.sigma1, d.nx, d.nx, "Sigma1")?;
        shape(&self.sigma_w, d.nw, d.nw, "Sigma_w")?;
        shape(&self.sigma_v, d.ny, d.ny, "Sigma_v")?;
        for (m, what) in [(&self.sigma1, "Sigma1"), (&self.sigma_w, "Sigma_w"), (&self.sigma_v, "Sigma_v")] {
            if !is_symmetric(m, 1e-10) {
                return Err(LgssError::InvalidModel(format!("{what} is not symmetric")));
            }
            linalg::is_psd(m, what)?;
        }
        Ok(d)
    }

    pub fn system(&self) -> SystemMatrices {
        SystemMatrices {
            a: self.a.clone(),
            b: self.b.clone(),
            g: self.g.clone(),
            c: self.c.clone(),
            d: self.d.clone(),
            sigma_v: self.sigma_v.clone(),
        }
    }

    pub fn with_system(&self, s: &SystemMatrices) -> ExplicitModel {
        ExplicitModel {
            a: s.a.clone(),
            b: s.b.clone(),
            g: s.g.clone(),
            c: s.c.clone(),
            d: s.d.clone(),
            sigma_v: s.sigma_v.clone(),
            ..self.clone()
        }
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.a)
    }

    /// State change `x' = diag(d) x`; the likelihood is unchanged.
    pub fn rescale_states(&self, d: &DVector<f64>) -> ExplicitModel {
        let dm = DMatrix::from_diagonal(d);
        let di = DMatrix::from_diagonal(&d.map(|v| 1.0 / v));
        ExplicitModel {
            mu: d.component_mul(&self.mu),
            sigma1: &dm * &self.sigma1 * &dm,
            a: &dm * &self.a * &di,
            b: &dm * &self.b,
            g: &dm * &self.g,
            c: &self.c * &di,
            ..self.clone()
        }
    }

    /// Per-state scaling that equalises `‖C e_i‖` and `‖e_i'[B G]‖`, or
    /// `None` when every state is within `max_ratio` of balanced.
    pub fn balancing_scale(&self, max_ratio: f64) -> Option<DVector<f64>> {
        let n = self.a.nrows();
        let mut off = false;
        let d = DVector::from_fn(n, |i, _| {
            let out = self.c.column(i).norm();
            let inp = (self.b.row(i).norm_squared() + self.g.row(i).norm_squared()).sqrt();
            if !(out > 0.0 && inp > 0.0 && out.is_finite() && inp.is_finite()) {
                return 1.0;
            }
            let r = out / inp;
            off |= !(1.0 / max_ratio..=max_ratio).contains(&r);
            r.sqrt()
        });
        off.then_some(d)
    }

    pub fn check_signals(&self, u: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<usize> {
        let d = self.dims();
        let t = y.ncols();
        if t == 0 {
            return Err(LgssError::DimensionMismatch("empty data record".into()));
        }
        shape(u, d.nu, t, "u")?;
        shape(y, d.ny, t, "y")?;
        Ok(t)
    }
}

impl ImplicitModel {
    /// `E = I, F = A, K = B, L = G`, with `P = I` as a placeholder certificate.
    pub fn from_system(s: &SystemMatrices) -> Self {
        let nx = s.a.nrows();
        ImplicitModel {
            e: DMatrix::identity(nx, nx),
            f: s.a.clone(),
            k: s.b.clone(),
            l: s.g.clone(),
            c: s.c.clone(),
            d: s.d.clone(),
            sigma_v: s.sigma_v.clone(),
            p: DMatrix::identity(nx, nx),
        }
    }

    pub fn dims(&self) -> Dimensions {
        Dimensions { nx: self.e.nrows(), nu: self.k.ncols(), ny: self.c.nrows(), nw: self.l.ncols() }
    }

    /// `A = E^{-1} F`, `B = E^{-1} K`, `G = E^{-1} L`.
    pub fn to_explicit(&self) -> Result<SystemMatrices> {
        let cond = condition_number(&self.e);
        if !(cond < 1e12) {
            return Err(LgssError::CertificateViolation(format!("E is ill-conditioned (cond {cond:.3e})")));
        }
        let lu = self.e.clone().lu();
        let solve = |m: &DMatrix<f64>| {
            lu.solve(m).ok_or_else(|| LgssError::CertificateViolation("E is singular".into()))
        };
        Ok(SystemMatrices {
            a: solve(&self.f)?,
            b: solve(&self.k)?,
            g: solve(&self.l)?,
            c: self.c.clone(),
            d: self.d.clone(),
            sigma_v: self.sigma_v.clone(),
        })
    }
}

/// States `x_1..x_T` from `x_1` and `w_1..w_T` (`w` may have `T` or `T-1` columns).
pub fn simulate(model: &ExplicitModel, u: &DMatrix<f64>, x1: &DVector<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    simulate_with(&model.a, &model.b, &model.g, u, x1, w)
}

pub fn simulate_with(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    g: &DMatrix<f64>,
    u: &DMatrix<f64>,
    x1: &DVector<f64>,
    w: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (nx, t) = (a.nrows(), u.ncols());
    if x1.len() != nx || b.ncols() != u.nrows() || g.ncols() != w.nrows() || w.ncols() + 1 < t {
        return Err(LgssError::DimensionMismatch("simulate: inconsistent signal shapes".into()));
    }
    let mut x = DMatrix::zeros(nx, t);
    x.set_column(0, x1);
    for k in 0..t.saturating_sub(1) {
        let next = a * x.column(k) + b * u.column(k) + g * w.column(k);
        x.set_column(k + 1, &next);
    }
    Ok(x)
}

/// `C x_t + D u_t` for every column.
pub fn outputs(c: &DMatrix<f64>, d: &DMatrix<f64>, x: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    c * x + d * u
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    // column-major fill keeps the draw order fixed
    DMatrix::from_iterator(r, c, (0..r * c).map(|_| StandardNormal.sample(&mut *rng)))
}

/// Draws `x_1`, then `w_1..w_T`, then `v_1..v_T` from a ChaCha8 stream seeded with `seed`.
pub fn sample_trajectory(model: &ExplicitModel, u: &DMatrix<f64>, seed: u64) -> Result<Trajectory> {
    let d = model.validate()?;
    let t = u.ncols();
    if u.nrows() != d.nu || t == 0 {
        return Err(LgssError::DimensionMismatch("u must be nu x T with T > 0".into()));
    }
    let l1 = psd_factor(&model.sigma1, "Sigma1")?;
    let lw = psd_factor(&model.sigma_w, "Sigma_w")?;
    let lv = psd_factor(&model.sigma_v, "Sigma_v")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e1 = normal_matrix(&mut rng, d.nx, 1);
    let ew = normal_matrix(&mut rng, d.nw, t);
    let ev = normal_matrix(&mut rng, d.ny, t);
    let x1 = &model.mu + l1 * e1.column(0);
    let w = lw * ew;
    let v = lv * ev;
    let x = simulate(model, u, &x1, &w)?;
    let y = outputs(&model.c, &model.d, &x, u) + &v;
    Ok(Trajectory { u: u.clone(), y, x: Some(x), w: Some(w), v: Some(v) })
}

/// White Gaussian input `nu x T`, unit variance.
pub fn white_input(nu: usize, t: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normal_matrix(&mut rng, nu, t)
}

/// Isotropic covariance levels: `Sigma1 = s1 I`, `Sigma_w = sw I`, `Sigma_v = sv I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevels {
    pub sigma1: f64,
    pub sigma_w: f64,
    pub sigma_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSystemSpec {
    pub dims: Dimensions,
    pub spectral_radius: f64,
    /// Force `G = I` (requires `nw = nx`).
    pub identity_g: bool,
    /// When false, `D = 0`.
    pub feedthrough: bool,
    pub noise: NoiseLevels,
}

/// I.i.d. normal `A` rescaled to the target spectral radius; `B, C, D, G` i.i.d. normal.
pub fn make_random_stable_system(spec: &RandomSystemSpec, seed: u64) -> Result<ExplicitModel> {
    let d = spec.dims;
    if spec.identity_g && d.nw != d.nx {
        return Err(LgssError::DimensionMismatch("identity G requires nw = nx".into()));
    }
    if !(spec.spectral_radius > 0.0) {
        return Err(LgssError::InvalidModel("target spectral radius must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = loop {
        let a = normal_matrix(&mut rng, d.nx, d.nx);
        let rho = spectral_radius(&a);
        if rho > 1e-8 {
            break a * (spec.spectral_radius / rho);
        }
    };
    let b = normal_matrix(&mut rng, d.nx, d.nu);
    let c = normal_matrix(&mut rng, d.ny, d.nx);
    let dd = normal_matrix(&mut rng, d.ny, d.nu);
    let g = normal_matrix(&mut rng, d.nx, d.nw);
    let n = spec.noise;
    let m = ExplicitModel {
        mu: DVector::zeros(d.nx),
        sigma1: DMatrix::identity(d.nx, d.nx) * n.sigma1,
        sigma_w: DMatrix::identity(d.nw, d.nw) * n.sigma_w,
        sigma_v: DMatrix::identity(d.ny, d.ny) * n.sigma_v,
        a,
        b,
        g: if spec.identity_g { DMatrix::identity(d.nx, d.nx) } else { g },
        c,
        d: if spec.feedthrough { dd } else { DMatrix::zeros(d.ny, d.nu) },
    };
    m.validate()?;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassSpringDamper {
    pub mass: f64,
    pub damping: f64,
    pub stiffness: f64,
    pub dt: f64,
}

impl Default for MassSpringDamper {
    fn default() -> Self {
        Self { mass: 1.0, damping: 0.4, stiffness: 1.0, dt: 0.1 }
    }
}

/// Euler-discretised mass-spring-damper; force input and force disturbance share
/// the input channel, so `G = B` and `G Sigma_w G'` has rank one.
pub fn mass_spring_damper(
    p: &MassSpringDamper,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    noise: NoiseLevels,
) -> Result<ExplicitModel> {
    if !(p.mass > 0.0 && p.dt > 0.0) {
        return Err(LgssError::InvalidModel("mass and time step must be positive".into()));
    }
    let a = DMatrix::from_row_slice(
        2,
        2,
        &[1.0, p.dt, -p.stiffness * p.dt / p.mass, 1.0 - p.damping * p.dt / p.mass],
    );
    let b = DMatrix::from_column_slice(2, 1, &[0.0, p.dt]);
    let ny = c.nrows();
    let m = ExplicitModel {
        mu: DVector::zeros(2),
        sigma1: DMatrix::identity(2, 2) * noise.sigma1,
        sigma_w: DMatrix::from_element(1, 1, noise.sigma_w),
        sigma_v: DMatrix::identity(ny, ny) * noise.sigma_v,
        a,
        g: b.clone(),
        b,
        c,
        d,
    };
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    #[test]
    fn rescaling_states_keeps_the_likelihood() {
        let spec = RandomSystemSpec {
            dims: Dimensions { nx: 2, nu: 1, ny: 1, nw: 1 },
            spectral_radius: 0.8,
            identity_g: false,
            feedthrough: true,
            noise: NoiseLevels { sigma1: 0.3, sigma_w: 0.2, sigma_v: 0.1 },
        };
        let m = make_random_stable_system(&spec, 3).unwrap();
        let u = white_input(1, 30, 4);
        let tr = sample_trajectory(&m, &u, 5).unwrap();
        let skewed = m.rescale_states(&DVector::from_vec(vec![1e-5, 30.0]));
        let l0 = crate::inference::log_likelihood(&m, &tr.u, &tr.y).unwrap();
        let l1 = crate::inference::log_likelihood(&skewed, &tr.u, &tr.y).unwrap();
        assert!((l0 - l1).abs() < 1e-8 * l0.abs().max(1.0), "{l0} {l1}");
        let d = skewed.balancing_scale(1e4).expect("skewed model is unbalanced");
        let back = skewed.rescale_states(&d);
        assert!(back.balancing_scale(1.0 + 1e-9).is_none());
        assert!(m.balancing_scale(1e4).is_none());
    }


    use super::*;

    fn small() -> ExplicitModel {
        ExplicitModel {
            mu: DVector::from_vec(vec![1.0, -1.0]),
            sigma1: DMatrix::identity(2, 2) * 0.1,
            sigma_w: DMatrix::identity(1, 1) * 0.2,
            sigma_v: DMatrix::identity(1, 1) * 0.3,
            a: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]),
            b: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            g: DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            c: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            d: DMatrix::from_element(1, 1, 0.5),
        }
    }

    #[test]
    fn zero_noise_sample_equals_simulation() {
        let mut m = small();
        m.sigma1.fill(0.0);
        m.sigma_w.fill(0.0);
        m.sigma_v.fill(0.0);
        let u = white_input(1, 20, 3);
        let tr = sample_trajectory(&m, &u, 9).unwrap();
        let x = simulate(&m, &u, &m.mu, &DMatrix::zeros(1, 20)).unwrap();
        let y = outputs(&m.c, &m.d, &x, &u);
        assert!((tr.y - y).amax() < 1e-14);
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = small();
        let u = white_input(1, 10, 1);
        assert_eq!(sample_trajectory(&m, &u, 5).unwrap(), sample_trajectory(&m, &u, 5).unwrap());
        assert_ne!(sample_trajectory(&m, &u, 5).unwrap().y, sample_trajectory(&m, &u, 6).unwrap().y);
    }

    #[test]
    fn json_uses_conventional_field_names() {
        let m = small();
        let s = serde_json::to_string(&m).unwrap();
        for key in ["\"mu\"", "\"Sigma1\"", "\"Sigma_w\"", "\"Sigma_v\"", "\"A\"", "\"B\"", "\"G\"", "\"C\"", "\"D\""] {
            assert!(s.contains(key), "{key} missing in {s}");
        }
        let back: ExplicitModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn validate_catches_bad_shapes_and_covariances() {
        let mut m = small();
        m.c = DMatrix::zeros(1, 3);
        assert!(matches!(m.validate(), Err(LgssError::DimensionMismatch(_))));
        let mut m = small();
        m.sigma_v[(0, 0)] = -1.0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn random_system_hits_target_radius() {
        let spec = RandomSystemSpec {
            dims: Dimensions { nx: 4, nu: 1, ny: 1, nw: 4 },
            spectral_radius: 0.9,
            identity_g: true,
            feedthrough: true,
            noise: NoiseLevels { sigma1: 1.0, sigma_w: 0.1, sigma_v: 0.1 },
        };
        let m = make_random_stable_system(&spec, 11).unwrap();
        assert!((m.spectral_radius() - 0.9).abs() < 1e-9);
        assert_eq!(m.g, DMatrix::identity(4, 4));
    }

    #[test]
    fn mass_spring_damper_disturbance_is_rank_one() {
        let m = mass_spring_damper(
            &MassSpringDamper::default(),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(1, 1),
            NoiseLevels { sigma1: 0.1, sigma_w: 0.5, sigma_v: 0.01 },
        )
        .unwrap();
        let q = &m.g * &m.sigma_w * m.g.transpose();
        let rank = q.symmetric_eigenvalues().iter().filter(|l| l.abs() > 1e-12).count();
        assert_eq!(rank, 1);
        assert!(m.spectral_radius() < 1.0);
    }
}
