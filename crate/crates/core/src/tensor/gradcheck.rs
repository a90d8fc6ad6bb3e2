use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Maximum relative error for a pass.
    pub tol: f64,
    /// Absolute error below which a coordinate passes regardless of `tol`.
    pub abs_floor: f64,
    /// Check only a seeded random subset of this many coordinates.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-8,
            max_coords: None,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tol(h: f64, tol: f64) -> Self {
        GradCheckConfig {
            h,
            tol,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub index: usize,
    pub autodiff: f64,
    pub numeric: f64,
    /// Relative error, or 0 when the absolute error is under the floor.
    pub error: f64,
    /// One-sided differences disagree: the function has a kink here and the
    /// coordinate is excluded from the verdict.
    pub kink: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords: Vec<CoordinateCheck>,
    pub max_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn kinks(&self) -> impl Iterator<Item = &CoordinateCheck> {
        self.coords.iter().filter(|c| c.kink)
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn grad_check<F>(f: F, x: &Tensor, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&tape, leaf)?;
    let f0 = out.item();
    let grads = tape.backward(out)?;
    let analytic = grads.wrt(leaf);

    let eval = |probe: &Tensor| -> Result<f64> {
        let tape = Tape::no_grad();
        let v = tape.constant(probe.clone());
        Ok(f(&tape, v)?.item())
    };

    let n = x.numel();
    let indices: Vec<usize> = match cfg.max_coords {
        Some(m) if m < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut picked = sample(&mut rng, n, m).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..n).collect(),
    };

    let mut coords = Vec::with_capacity(indices.len());
    let mut probe = x.clone();
    for i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + cfg.h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - cfg.h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (fp - fm) / (2.0 * cfg.h);
        let forward = (fp - f0) / cfg.h;
        let backward = (f0 - fm) / cfg.h;
        let scale = 1.0f64.max(forward.abs()).max(backward.abs());
        let kink = (forward - backward).abs() > 1e-2 * scale;

        let a = analytic.data()[i];
        let abs_err = (a - numeric).abs();
        let error = if abs_err < cfg.abs_floor {
            0.0
        } else {
            abs_err / a.abs().max(numeric.abs())
        };
        coords.push(CoordinateCheck {
            index: i,
            autodiff: a,
            numeric,
            error,
            kink,
        });
    }
    let max_error = coords
        .iter()
        .filter(|c| !c.kink)
        .map(|c| c.error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_error < cfg.tol,
        coords,
        max_error,
    })
}
