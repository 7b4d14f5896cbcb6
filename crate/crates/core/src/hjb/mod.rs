//! Backward solver for one sub-population's control problem at a fixed
//! price path.
//!
//! The value function solves
//!
//! ```text
//! ∂_t V + (h + a)∂_x V − (∂_x V)²/(2ζ) − (∂_x V + S)²/(2γ) − (∂_a V)²/(2β) + σ²/2 ∂_xx V = 0,
//! V(T, x, a) = C(x).
//! ```
//!
//! Each time step treats the x-direction implicitly (advection and diffusion,
//! solved line by line with policy iteration) and the a-direction with an
//! explicit upwind step. In x the drift term is centred wherever the cell
//! Péclet number |b|Δx/σ² is at most one, and upwinded elsewhere, so the
//! scheme stays monotone. Y^X and Y^A are central differences of V.

mod propagator;
mod scheme;

use serde::Serialize;

use crate::exec::{self, Exec};
use crate::model::{PenaltySpec, StateGrid, SubPopulationParams};
use crate::Result;

pub use propagator::{ATransport, StepPropagator, TriDiag};

/// Price S_t on the time grid (length `nt + 1`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PricePath(pub Vec<f64>);

impl PricePath {
    pub fn constant(value: f64, grid: &StateGrid) -> Self {
        PricePath(vec![value; grid.nt + 1])
    }

    pub fn at(&self, n: usize) -> f64 {
        self.0[n]
    }

    pub fn sup_distance(&self, other: &PricePath) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// max_t |S_t − S_0|.
    pub fn max_deviation_from_start(&self) -> f64 {
        let s0 = self.0[0];
        self.0.iter().fold(0.0f64, |m, s| m.max((s - s0).abs()))
    }
}

/// Time discretisation of the backward step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    /// Backward Euler in x with an explicit capacity step; monotone, first order.
    Implicit,
    /// Crank–Nicolson in x after two implicit start-up steps, with a
    /// predictor–corrector capacity step; second order for smooth data.
    #[default]
    CrankNicolson,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Sup-norm change of V between policy iterations that counts as converged.
    pub tol: f64,
    pub max_iter: usize,
    pub scheme: TimeScheme,
    pub exec: Exec,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 50,
            scheme: TimeScheme::default(),
            exec: Exec::Parallel,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    pub max_policy_iterations: usize,
    /// Interior (t, x, a) nodes where the x-drift had to be upwinded.
    pub upwind_nodes: usize,
    /// Nodes where g < −1e-9 or α < −1e-9.
    pub negative_control_nodes: usize,
    pub max_a_courant: f64,
}

/// Optimal feedback of one sub-population on the full (t, x, a) grid.
#[derive(Debug, Clone)]
pub struct FeedbackSolution {
    pub k: usize,
    pub grid: StateGrid,
    pub params: SubPopulationParams,
    pub penalty: PenaltySpec,
    pub price: PricePath,
    /// Flat arrays indexed by [`StateGrid::idx`].
    pub v: Vec<f64>,
    pub yx: Vec<f64>,
    pub ya: Vec<f64>,
    pub diagnostics: SolveDiagnostics,
    pub options: SolverOptions,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Controls {
    pub g: f64,
    pub gamma: f64,
    pub alpha: f64,
}

/// Optimal controls from the adjoints: g = −Y^X/ζ, Γ = (−Y^X − S)/γ, α = −Y^A/β.
pub fn feedback_controls(yx: f64, ya: f64, price: f64, params: &SubPopulationParams) -> Controls {
    Controls {
        g: -yx / params.zeta,
        gamma: (-yx - price) / params.gamma,
        alpha: -ya / params.beta,
    }
}

impl Controls {
    /// Violates g ≥ 0 or α ≥ 0 beyond round-off.
    pub fn is_negative(&self) -> bool {
        self.g < -1e-9 || self.alpha < -1e-9
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interpolated {
    pub yx: f64,
    pub ya: f64,
    pub v: f64,
    /// The query was outside the grid and has been clamped to it.
    pub clamped: bool,
}

/// Solves backward from V(T) = C and returns V, Y^X, Y^A on the grid.
pub fn solve_backward(
    k: usize,
    params: &SubPopulationParams,
    penalty: &PenaltySpec,
    price: &PricePath,
    grid: &StateGrid,
    opts: &SolverOptions,
) -> Result<FeedbackSolution> {
    scheme::check_grid(grid, price)?;
    let slice = grid.slice_len();
    let mut v = vec![0.0; slice * (grid.nt + 1)];
    {
        let terminal = &mut v[grid.nt * slice..];
        for l in 0..grid.na {
            for j in 0..grid.nx {
                terminal[l * grid.nx + j] = penalty.value(grid.x(j));
            }
        }
    }
    let mut diagnostics = SolveDiagnostics::default();
    for n in (0..grid.nt).rev() {
        let (head, tail) = v.split_at_mut((n + 1) * slice);
        let next = &tail[..slice];
        let current = &mut head[n * slice..];
        let step = scheme::step(n, params, price, grid, next, current, opts)?;
        diagnostics.max_policy_iterations = diagnostics.max_policy_iterations.max(step.iterations);
        diagnostics.upwind_nodes += step.upwind_nodes;
        diagnostics.max_a_courant = diagnostics.max_a_courant.max(step.max_courant);
    }

    let mut yx = vec![0.0; v.len()];
    let mut ya = vec![0.0; v.len()];
    exec::for_each_chunk_mut(opts.exec, &mut yx, slice, |n, out| {
        scheme::x_gradient(grid, &v[n * slice..(n + 1) * slice], out)
    });
    exec::for_each_chunk_mut(opts.exec, &mut ya, slice, |n, out| {
        scheme::a_gradient(grid, &v[n * slice..(n + 1) * slice], out)
    });

    let mut sol = FeedbackSolution {
        k,
        grid: *grid,
        params: params.clone(),
        penalty: *penalty,
        price: price.clone(),
        v,
        yx,
        ya,
        diagnostics,
        options: *opts,
    };
    sol.diagnostics.negative_control_nodes = sol.count_negative_controls();
    Ok(sol)
}

impl FeedbackSolution {
    #[inline]
    pub fn at(&self, n: usize, j: usize, l: usize) -> (f64, f64, f64) {
        let i = self.grid.idx(n, j, l);
        (self.v[i], self.yx[i], self.ya[i])
    }

    pub fn slice_v(&self, n: usize) -> &[f64] {
        let s = self.grid.slice_len();
        &self.v[n * s..(n + 1) * s]
    }

    pub fn slice_yx(&self, n: usize) -> &[f64] {
        let s = self.grid.slice_len();
        &self.yx[n * s..(n + 1) * s]
    }

    pub fn slice_ya(&self, n: usize) -> &[f64] {
        let s = self.grid.slice_len();
        &self.ya[n * s..(n + 1) * s]
    }

    fn count_negative_controls(&self) -> usize {
        let s = self.grid.slice_len();
        (0..self.yx.len())
            .filter(|&i| {
                let n = i / s;
                feedback_controls(self.yx[i], self.ya[i], self.price.at(n), &self.params)
                    .is_negative()
            })
            .count()
    }

    /// Bilinear interpolation of (Y^X, Y^A) in (x, a) at time node `n`.
    #[inline]
    pub fn sample_node(&self, n: usize, x: f64, a: f64) -> (f64, f64, bool) {
        let g = &self.grid;
        let (j, fx, cx) = locate(x, g.x_min, g.dx(), g.nx);
        let (l, fa, ca) = locate(a, g.a_min, g.da(), g.na);
        let base = g.idx(n, j, l);
        let yx = bilinear(&self.yx, base, g.nx, fx, fa);
        let ya = bilinear(&self.ya, base, g.nx, fx, fa);
        (yx, ya, cx || ca)
    }

    /// Trilinear interpolation of (Y^X, Y^A, V); exact at grid nodes.
    pub fn interpolate(&self, t: f64, x: f64, a: f64) -> Interpolated {
        let g = &self.grid;
        let (n, ft, ct) = locate(t, 0.0, g.dt(), g.nt + 1);
        let (j, fx, cx) = locate(x, g.x_min, g.dx(), g.nx);
        let (l, fa, ca) = locate(a, g.a_min, g.da(), g.na);
        let b0 = g.idx(n, j, l);
        let b1 = g.idx((n + 1).min(g.nt), j, l);
        let lerp = |f: &[f64]| {
            let lo = bilinear(f, b0, g.nx, fx, fa);
            if ft == 0.0 {
                lo
            } else {
                lo * (1.0 - ft) + bilinear(f, b1, g.nx, fx, fa) * ft
            }
        };
        Interpolated {
            yx: lerp(&self.yx),
            ya: lerp(&self.ya),
            v: lerp(&self.v),
            clamped: ct || cx || ca,
        }
    }

    /// Z^X = σ·∂_x Y^X at node (n, j, l), by central differences.
    pub fn z_x(&self, n: usize, j: usize, l: usize) -> f64 {
        let g = &self.grid;
        let (lo, hi) = (j.saturating_sub(1), (j + 1).min(g.nx - 1));
        let d = (self.yx[g.idx(n, hi, l)] - self.yx[g.idx(n, lo, l)]) / ((hi - lo) as f64 * g.dx());
        self.params.sigma * d
    }
}

/// Cell index, fractional offset and clamp flag of `v` on a uniform axis.
#[inline]
fn locate(v: f64, lo: f64, step: f64, n: usize) -> (usize, f64, bool) {
    let mut pos = (v - lo) / step;
    let clamped = !(pos >= -1e-9 && pos <= (n - 1) as f64 + 1e-9);
    pos = pos.clamp(0.0, (n - 1) as f64);
    let r = pos.round();
    if (pos - r).abs() < 1e-9 {
        pos = r;
    }
    let i = (pos.floor() as usize).min(n.saturating_sub(2));
    let f = pos - i as f64;
    (i, f, clamped)
}

#[inline]
fn bilinear(f: &[f64], base: usize, nx: usize, fx: f64, fa: f64) -> f64 {
    let lerp_x = |b: usize| {
        if fx == 0.0 {
            f[b]
        } else {
            f[b] * (1.0 - fx) + f[b + 1] * fx
        }
    };
    let lo = lerp_x(base);
    if fa == 0.0 {
        lo
    } else {
        lo * (1.0 - fa) + lerp_x(base + nx) * fa
    }
}

#[cfg(test)]
mod tests;
