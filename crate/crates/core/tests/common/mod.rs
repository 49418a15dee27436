#![allow(dead_code)]

use lgss_core::model::{
    make_random_stable_system, mass_spring_damper, sample_trajectory, white_input, Dimensions,
    ExplicitModel, MassSpringDamper, NoiseLevels, RandomSystemSpec, Trajectory,
};
use nalgebra::DMatrix;

pub fn random_model(nx: usize, nw: usize, identity_g: bool, seed: u64) -> ExplicitModel {
    make_random_stable_system(
        &RandomSystemSpec {
            dims: Dimensions { nx, nu: 1, ny: 1, nw },
            spectral_radius: 0.8,
            identity_g,
            feedthrough: true,
            noise: NoiseLevels { sigma1: 0.5, sigma_w: 0.2, sigma_v: 0.1 },
        },
        seed,
    )
    .unwrap()
}

pub fn data(m: &ExplicitModel, t: usize, seed: u64) -> Trajectory {
    let u = white_input(m.dims().nu, t, seed.wrapping_add(1000));
    sample_trajectory(m, &u, seed).unwrap()
}

pub fn msd() -> ExplicitModel {
    mass_spring_damper(
        &MassSpringDamper::default(),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::zeros(1, 1),
        NoiseLevels { sigma1: 0.1, sigma_w: 0.5, sigma_v: 0.01 },
    )
    .unwrap()
}

pub fn scalar(a: f64, sigma_w: f64, sigma_v: f64, sigma1: f64) -> ExplicitModel {
    let one = DMatrix::from_element(1, 1, 1.0);
    ExplicitModel {
        mu: nalgebra::DVector::zeros(1),
        sigma1: &one * sigma1,
        sigma_w: &one * sigma_w,
        sigma_v: &one * sigma_v,
        a: &one * a,
        b: one.clone(),
        g: one.clone(),
        c: one.clone(),
        d: DMatrix::zeros(1, 1),
    }
}
