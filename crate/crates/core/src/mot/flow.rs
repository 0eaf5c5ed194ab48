//! Rectified-flow noising and Euler integration.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tokenstream::{PackedSequence, Payload};

/// Flow time of each `(sample, group)` noise group.
pub type FlowTimes = BTreeMap<(u32, u32), f64>;

/// x_t = (1 - t)·ε + t·x₁
pub fn interpolate(x1: &[f64], eps: &[f64], t: f64) -> Vec<f64> {
    x1.iter().zip(eps).map(|(a, e)| (1.0 - t) * e + t * a).collect()
}

/// v* = x₁ - ε
pub fn velocity_target(x1: &[f64], eps: &[f64]) -> Vec<f64> {
    x1.iter().zip(eps).map(|(a, e)| a - e).collect()
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// A packed batch whose loss-flagged noise records carry x_t payloads.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub packed: PackedSequence,
    pub times: FlowTimes,
    /// Target velocity per record (noise records only).
    pub velocity: Vec<Option<Vec<f64>>>,
}

/// Draws one t ~ U(0, 1) per noise group and ε ~ N(0, I) per record.
pub fn noise_batch(mut packed: PackedSequence, rng: &mut impl Rng) -> Result<NoisedBatch> {
    let mut times = FlowTimes::new();
    let mut velocity = vec![None; packed.records.len()];
    for (i, r) in packed.records.iter_mut().enumerate() {
        if !r.role.is_noise() {
            continue;
        }
        let group = r
            .group
            .ok_or_else(|| Error::Input(format!("noise record {i} has no group")))?;
        let t = *times.entry((r.sample, group)).or_insert_with(|| rng.random::<f64>());
        let Some(Payload::Vector(x1)) = &r.target else {
            return Err(Error::Input(format!("noise record {i} has no vector target")));
        };
        let eps = standard_normal(rng, x1.len());
        velocity[i] = Some(velocity_target(x1, &eps));
        r.payload = Payload::Vector(interpolate(x1, &eps, t));
    }
    Ok(NoisedBatch {
        packed,
        times,
        velocity,
    })
}

/// Integrates dx/dt = v(x, t) from `x0` at t = 0 to t = 1 in `steps` uniform
/// Euler steps.
pub fn euler(
    x0: Vec<Vec<f64>>,
    steps: usize,
    mut v: impl FnMut(&[Vec<f64>], f64) -> Result<Vec<Vec<f64>>>,
) -> Result<Vec<Vec<f64>>> {
    if steps == 0 {
        return Err(Error::Config("flow steps must be >= 1".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0;
    for k in 0..steps {
        let vel = v(&x, k as f64 * dt)?;
        if vel.len() != x.len() {
            return Err(Error::Sampling {
                step: k,
                message: "velocity shape mismatch".into(),
            });
        }
        for (xr, vr) in x.iter_mut().zip(&vel) {
            for (a, b) in xr.iter_mut().zip(vr) {
                *a += dt * b;
            }
        }
        if x.iter().flatten().any(|a| !a.is_finite()) {
            return Err(Error::Sampling {
                step: k,
                message: "non-finite value during integration".into(),
            });
        }
    }
    Ok(x)
}

/// Sinusoidal embedding of flow time, width `d`.
pub fn time_embedding(t: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let a = 1000.0 * t * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    #[test]
    fn linear_velocity_oracle_is_exact() {
        let mut rng = rng_for(3, "t");
        let x1 = [standard_normal(&mut rng, 5), standard_normal(&mut rng, 5)];
        let eps = vec![standard_normal(&mut rng, 5), standard_normal(&mut rng, 5)];
        for n in [1, 2, 3, 7, 50] {
            let out = euler(eps.clone(), n, |_, _| {
                Ok(x1.iter().zip(&eps).map(|(a, e)| velocity_target(a, e)).collect())
            })
            .unwrap();
            for (o, a) in out.iter().flatten().zip(x1.iter().flatten()) {
                assert!((o - a).abs() < 1e-6);
            }
        }
        // endpoint
        assert_eq!(interpolate(&x1[0], &eps[0], 1.0), x1[0]);
    }

    #[test]
    fn nan_reports_step() {
        let err = euler(vec![vec![0.0]], 4, |_, t| {
            Ok(vec![vec![if t >= 0.5 { f64::NAN } else { 1.0 }]])
        })
        .unwrap_err();
        assert!(matches!(err, Error::Sampling { step: 2, .. }));
    }
}
