//! Time grids commensurate with the delay and counter-based Brownian increments.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

const ALIGN_TOL: f64 = 1e-9;

/// Uniform grid on `[0, T]` with the delay an exact multiple of the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
    pub dt: f64,
    pub delay: f64,
    /// Delay measured in steps, `d = lag * dt`.
    pub lag: usize,
}

impl TimeGrid {
    pub fn time(&self, i: isize) -> f64 {
        i as f64 * self.dt
    }

    /// Number of stored nodes for a process on `[-d, T]`.
    pub fn history_nodes(&self) -> usize {
        self.steps + self.lag + 1
    }

    /// Grid index of an aligned time, or an alignment error.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let k = t / self.dt;
        let r = k.round();
        if (k - r).abs() > ALIGN_TOL * k.abs().max(1.0) || r < 0.0 {
            return Err(Error::Alignment(format!(
                "time {t} is not a grid node of step {}",
                self.dt
            )));
        }
        Ok(r as usize)
    }

    /// Number of steps covered by an aligned duration.
    pub fn steps_in(&self, width: f64) -> Result<usize> {
        self.index_of(width)
    }

    /// Grid with half the step on the same horizon and delay.
    pub fn refined(&self) -> Result<TimeGrid> {
        make_grid(self.horizon, self.steps * 2, self.delay)
    }
}

/// Builds a grid with `d / dt` integral; otherwise suggests the nearest step count that is.
pub fn make_grid(horizon: f64, steps: usize, delay: f64) -> Result<TimeGrid> {
    if steps == 0 {
        return Err(Error::Domain("grid needs at least one step".into()));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
    }
    if !(delay >= 0.0) || !delay.is_finite() {
        return Err(Error::Domain(format!("delay must be non-negative, got {delay}")));
    }
    let dt = horizon / steps as f64;
    match commensurate_lag(horizon, steps, delay) {
        Some(lag) => Ok(TimeGrid {
            horizon,
            steps,
            dt,
            delay,
            lag,
        }),
        None => Err(Error::Grid {
            delay,
            dt,
            suggested_steps: suggest_steps(horizon, steps, delay),
        }),
    }
}

fn commensurate_lag(horizon: f64, steps: usize, delay: f64) -> Option<usize> {
    let k = delay * steps as f64 / horizon;
    let r = k.round();
    ((k - r).abs() <= ALIGN_TOL * k.max(1.0)).then_some(r as usize)
}

fn suggest_steps(horizon: f64, steps: usize, delay: f64) -> usize {
    for dist in 1..1_000_000usize {
        let up = steps + dist;
        if commensurate_lag(horizon, up, delay).is_some() {
            if steps > dist && commensurate_lag(horizon, steps - dist, delay).is_some() {
                return steps - dist;
            }
            return up;
        }
        if steps > dist && commensurate_lag(horizon, steps - dist, delay).is_some() {
            return steps - dist;
        }
    }
    steps
}

/// Brownian increments for `paths` paths, generated from a keyed stream cipher.
///
/// Increment `(path, step, component)` is a deterministic function of the seed and that
/// triple, so any worker can regenerate any path range.
#[derive(Debug, Clone)]
pub struct BrownianBundle {
    pub grid: TimeGrid,
    pub paths: usize,
    pub noise_dim: usize,
    pub seed: u64,
    pub antithetic: bool,
    dw: Vec<f64>,
}

fn seed_bytes(seed: u64) -> [u8; 32] {
    let mut out = [0u8; 32];
    let mut state = seed;
    for chunk in out.chunks_mut(8) {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    out
}

fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    let a = rng.next_u64();
    let b = rng.next_u64();
    let u1 = ((a >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
    let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Standard normal keyed by `(seed, stream, step, component)`.
pub fn keyed_normal(seed: u64, stream: u64, step: usize, comp: usize, noise_dim: usize) -> f64 {
    let mut rng = ChaCha8Rng::from_seed(seed_bytes(seed));
    rng.set_stream(stream);
    rng.set_word_pos(((step * noise_dim + comp) as u128) * 4);
    box_muller(&mut rng)
}

impl BrownianBundle {
    pub fn generate(
        grid: TimeGrid,
        paths: usize,
        noise_dim: usize,
        seed: u64,
        antithetic: bool,
    ) -> Result<Self> {
        if paths == 0 {
            return Err(Error::Domain("at least one path is required".into()));
        }
        if noise_dim == 0 {
            return Err(Error::Domain("noise dimension must be positive".into()));
        }
        let per_path = grid.steps * noise_dim;
        let sdt = grid.dt.sqrt();
        let key = seed_bytes(seed);
        let mut dw = vec![0.0; paths * per_path];
        dw.par_chunks_mut(per_path)
            .enumerate()
            .for_each(|(p, row)| {
                let (stream, sign) = if antithetic {
                    ((p / 2) as u64, if p % 2 == 1 { -1.0 } else { 1.0 })
                } else {
                    (p as u64, 1.0)
                };
                let mut rng = ChaCha8Rng::from_seed(key);
                rng.set_stream(stream);
                rng.set_word_pos(0);
                for v in row.iter_mut() {
                    *v = sign * sdt * box_muller(&mut rng);
                }
            });
        Ok(Self {
            grid,
            paths,
            noise_dim,
            seed,
            antithetic,
            dw,
        })
    }

    #[inline]
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let m = self.noise_dim;
        let base = (path * self.grid.steps + step) * m;
        &self.dw[base..base + m]
    }

    pub fn raw(&self) -> &[f64] {
        &self.dw
    }

    /// Bundle on the grid with twice the step, obtained by summing consecutive increments.
    ///
    /// The coarse and fine bundles share the same Brownian paths.
    pub fn coarsen(&self) -> Result<Self> {
        if self.grid.steps % 2 != 0 || self.grid.lag % 2 != 0 {
            return Err(Error::Domain(
                "coarsening needs an even step count and an even delay lag".into(),
            ));
        }
        let grid = make_grid(self.grid.horizon, self.grid.steps / 2, self.grid.delay)?;
        let m = self.noise_dim;
        let mut dw = vec![0.0; self.paths * grid.steps * m];
        for p in 0..self.paths {
            for i in 0..grid.steps {
                for c in 0..m {
                    dw[(p * grid.steps + i) * m + c] =
                        self.increment(p, 2 * i)[c] + self.increment(p, 2 * i + 1)[c];
                }
            }
        }
        Ok(Self {
            grid,
            paths: self.paths,
            noise_dim: m,
            seed: self.seed,
            antithetic: self.antithetic,
            dw,
        })
    }

    /// Sum of increments of component `comp` over steps `[from, to)` on one path.
    pub fn window_sum(&self, path: usize, from: usize, to: usize, comp: usize) -> f64 {
        (from..to).map(|i| self.increment(path, i)[comp]).sum()
    }
}

/// Draws a bundle for `grid` with `paths` paths and the given seed.
pub fn sample_brownian(grid: TimeGrid, paths: usize, noise_dim: usize, seed: u64) -> Result<BrownianBundle> {
    BrownianBundle::generate(grid, paths, noise_dim, seed, false)
}
