//! Initial-condition ensembles: gradient-lattice (Perlin) noise on the
//! normalized initial state, independent member rollouts, and the
//! pointwise ensemble mean.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fieldio::{FieldTensor, GridSpec};
use crate::network::{GraphTensors, Model};
use crate::rng::member_stream;
use crate::tensorcore::{ParamStore, Real, Tensor2};
use crate::training::rollout;

/// Gradient-noise parameters. The lattice is periodic in longitude.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerlinSpec {
    pub octaves: usize,
    /// Grid cells per lattice period at the base octave.
    pub base_period: f64,
    pub persistence: f64,
    /// Peak perturbation in normalized units.
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for PerlinSpec {
    fn default() -> Self {
        PerlinSpec {
            octaves: 3,
            base_period: 4.0,
            persistence: 0.5,
            amplitude: 0.05,
            seed: 0,
        }
    }
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// One octave of classic gradient noise on an `ny × nx` lattice (longitude
/// wraps, latitude does not). Values vanish exactly on lattice points.
fn perlin_octave(h: usize, w: usize, nx: usize, ny: usize, rng: &mut impl Rng) -> Vec<f64> {
    // Unit gradients at lattice points: (ny+1) rows × nx wrapped columns.
    let mut grads = Vec::with_capacity((ny + 1) * nx);
    for _ in 0..(ny + 1) * nx {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        grads.push((angle.cos(), angle.sin()));
    }
    let grad = |gy: usize, gx: usize| grads[gy * nx + gx % nx];
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let y = i as f64 * ny as f64 / h as f64;
        let y0 = (y.floor() as usize).min(ny - 1);
        let fy = y - y0 as f64;
        for j in 0..w {
            let x = j as f64 * nx as f64 / w as f64;
            let x0 = x.floor() as usize;
            let fx = x - x0 as f64;
            let dot = |gy: usize, gx: usize, dx: f64, dy: f64| {
                let (gxv, gyv) = grad(gy, gx);
                gxv * dx + gyv * dy
            };
            let n00 = dot(y0, x0, fx, fy);
            let n01 = dot(y0, x0 + 1, fx - 1.0, fy);
            let n10 = dot(y0 + 1, x0, fx, fy - 1.0);
            let n11 = dot(y0 + 1, x0 + 1, fx - 1.0, fy - 1.0);
            let (u, v) = (fade(fx), fade(fy));
            let a = n00 + u * (n01 - n00);
            let b = n10 + u * (n11 - n10);
            out[i * w + j] = a + v * (b - a);
        }
    }
    out
}

/// Multi-octave gradient noise as a single-channel field. Bounded by
/// `amplitude · Σ persistence^k`.
pub fn perlin2d(h: usize, w: usize, spec: &PerlinSpec) -> FieldTensor {
    assert!(spec.octaves >= 1, "octaves must be ≥ 1");
    assert!(spec.amplitude >= 0.0, "amplitude must be ≥ 0");
    let mut rng = member_stream(spec.seed, "noise", 0);
    let mut data = vec![0.0; h * w];
    if spec.amplitude > 0.0 {
        for k in 0..spec.octaves {
            let scale = spec.amplitude * spec.persistence.powi(k as i32);
            let nx = ((w as f64 / spec.base_period).round().max(1.0) as usize) << k;
            let ny = ((h as f64 / spec.base_period).round().max(1.0) as usize) << k;
            let octave = perlin_octave(h, w, nx.min(w), ny.min(h), &mut rng);
            for (d, o) in data.iter_mut().zip(&octave) {
                *d += scale * o;
            }
        }
    }
    FieldTensor {
        c: 1,
        h,
        w,
        data,
        grid: GridSpec::global(h, w),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: usize,
    pub noise: PerlinSpec,
}

/// Perturb every channel of a normalized state with an independent noise
/// field seeded by `(seed, member, channel)`.
pub fn perturb_initial(z0: &FieldTensor, spec: &PerlinSpec, member: u64) -> FieldTensor {
    let mut out = z0.clone();
    for ch in 0..z0.c {
        let member_spec = PerlinSpec {
            seed: spec
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add(member * 631 + ch as u64),
            ..spec.clone()
        };
        let noise = perlin2d(z0.h, z0.w, &member_spec);
        for (v, n) in out.channel_mut(ch).iter_mut().zip(&noise.data) {
            *v += n;
        }
    }
    out
}

/// Member rollouts plus the pointwise ensemble mean per step. Member `n`
/// starts from `z0 + ε⁽ⁿ⁾`; the mean is accumulated in ascending member
/// order regardless of how many worker threads ran.
pub fn ensemble_forecast<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    gt: &GraphTensors<T>,
    z0: &FieldTensor,
    spec: &EnsembleSpec,
    steps: usize,
    threads: usize,
) -> Result<(Vec<Vec<FieldTensor>>, Vec<FieldTensor>)> {
    assert!(spec.members >= 1);
    let run_member = |n: usize| -> Result<Vec<FieldTensor>> {
        let perturbed = perturb_initial(z0, &spec.noise, n as u64);
        let states = rollout(model, store, gt, &perturbed.to_node_matrix::<T>(), steps)?;
        Ok(states
            .iter()
            .map(|m: &Tensor2<T>| FieldTensor::from_node_matrix(m, z0.h, z0.w, z0.grid))
            .collect())
    };

    let members: Vec<Vec<FieldTensor>> = if threads <= 1 {
        (0..spec.members).map(run_member).collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<Result<Vec<FieldTensor>>>> =
            (0..spec.members).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (n, slot) in slots.iter_mut().enumerate() {
                if handles.len() == threads {
                    let h: std::thread::ScopedJoinHandle<'_, ()> = handles.remove(0);
                    h.join().expect("ensemble worker panicked");
                }
                handles.push(scope.spawn(move || {
                    *slot = Some(run_member(n));
                }));
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("member not computed"))
            .collect::<Result<_>>()?
    };

    let mut mean = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut acc = FieldTensor::zeros(z0.c, z0.h, z0.w, z0.grid);
        for member in &members {
            for (a, v) in acc.data.iter_mut().zip(&member[t].data) {
                *a += v;
            }
        }
        for a in &mut acc.data {
            *a /= spec.members as f64;
        }
        mean.push(acc);
    }
    Ok((members, mean))
}
