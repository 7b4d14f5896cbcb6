use crate::exec;
use crate::model::{StateGrid, SubPopulationParams};
use crate::{Error, Result};

use super::{PricePath, SolverOptions, TimeScheme};

pub(super) struct StepStats {
    pub iterations: usize,
    pub upwind_nodes: usize,
    pub max_courant: f64,
}

pub(super) fn check_grid(grid: &StateGrid, price: &PricePath) -> Result<()> {
    if grid.nx < 4 || grid.na < 2 || grid.nt < 1 {
        return Err(Error::GridTooCoarse(format!(
            "need nx >= 4, na >= 2, nt >= 1 (got {}, {}, {})",
            grid.nx, grid.na, grid.nt
        )));
    }
    if price.0.len() != grid.nt + 1 || price.0.iter().any(|s| !s.is_finite()) {
        return Err(Error::Unsupported(format!(
            "price path must hold {} finite values",
            grid.nt + 1
        )));
    }
    Ok(())
}

/// Implicit weight of the x-operator on step n, and whether the capacity
/// term gets a corrector pass. Crank–Nicolson starts with two implicit steps.
pub(crate) fn step_weights(scheme: TimeScheme, n: usize, nt: usize) -> (f64, bool) {
    match scheme {
        TimeScheme::Implicit => (1.0, false),
        TimeScheme::CrankNicolson if n + 2 >= nt => (1.0, true),
        TimeScheme::CrankNicolson => (0.5, true),
    }
}

/// One-sided difference stencil in a: (indices, weights) with
/// ∂_a V ≈ Σ w·V[idx] / Δa. `dir` is +1 for forward-biased and −1 for
/// backward-biased; near the a-boundaries the missing side is replaced by the
/// inward stencil of the same order.
#[inline]
pub(crate) fn a_stencil(l: usize, na: usize, dir: i8, order: usize) -> ([usize; 3], [f64; 3]) {
    let fwd1 = |l: usize| ([l, l + 1, l], [-1.0, 1.0, 0.0]);
    let fwd2 = |l: usize| ([l, l + 1, l + 2], [-1.5, 2.0, -0.5]);
    let bwd2 = |l: usize| ([l - 2, l - 1, l], [0.5, -2.0, 1.5]);
    let mid = |l: usize| ([l - 1, l + 1, l], [-0.5, 0.5, 0.0]);
    if order == 1 || na < 3 {
        return match dir {
            1 if l + 1 < na => fwd1(l),
            _ if l > 0 => fwd1(l - 1),
            _ => fwd1(0),
        };
    }
    match dir {
        1 if l + 2 < na => fwd2(l),
        1 if l >= 1 && l + 1 < na => mid(l),
        1 => bwd2(l),
        _ if l >= 2 => bwd2(l),
        _ if l >= 1 && l + 1 < na => mid(l),
        _ => fwd2(l),
    }
}

#[inline]
fn stencil_apply(slice: &[f64], nx: usize, j: usize, (idx, w): ([usize; 3], [f64; 3])) -> f64 {
    w[0] * slice[idx[0] * nx + j] + w[1] * slice[idx[1] * nx + j] + w[2] * slice[idx[2] * nx + j]
}

/// Capacity difference order used by a time scheme.
pub(crate) fn a_order(scheme: TimeScheme) -> usize {
    match scheme {
        TimeScheme::Implicit => 1,
        TimeScheme::CrankNicolson => 2,
    }
}

/// Explicit capacity control at node (j, l) of `slice`.
///
/// Returns (α, direction, Hamiltonian value) where direction is +1 when the
/// forward-biased difference was used, −1 for the backward-biased one and 0
/// when α = 0.
#[inline]
pub(crate) fn alpha_choice(
    slice: &[f64],
    grid: &StateGrid,
    j: usize,
    l: usize,
    beta: f64,
    order: usize,
) -> (f64, i8, f64) {
    let nx = grid.nx;
    let da = grid.da();
    let na = grid.na;
    let q_plus = stencil_apply(slice, nx, j, a_stencil(l, na, 1, order)) / da;
    let q_minus = stencil_apply(slice, nx, j, a_stencil(l, na, -1, order)) / da;
    let a_plus = -q_plus / beta;
    let a_minus = -q_minus / beta;
    let h_plus = if a_plus > 0.0 {
        Some(-q_plus * q_plus / (2.0 * beta))
    } else {
        None
    };
    let h_minus = if a_minus < 0.0 {
        Some(-q_minus * q_minus / (2.0 * beta))
    } else {
        None
    };
    match (h_plus, h_minus) {
        (Some(hp), Some(hm)) if hm < hp => (a_minus, -1, hm),
        (Some(hp), _) => (a_plus, 1, hp),
        (None, Some(hm)) => (a_minus, -1, hm),
        (None, None) => (0.0, 0, 0.0),
    }
}

/// Capacity Hamiltonian at every node of `slice` and the largest |α|.
fn a_hamiltonian(slice: &[f64], grid: &StateGrid, beta: f64, order: usize) -> (Vec<f64>, f64) {
    let mut out = vec![0.0; slice.len()];
    let mut max_alpha: f64 = 0.0;
    for l in 0..grid.na {
        for j in 0..grid.nx {
            let (alpha, _, h) = alpha_choice(slice, grid, j, l, beta, order);
            out[l * grid.nx + j] = h;
            max_alpha = max_alpha.max(alpha.abs());
        }
    }
    (out, max_alpha)
}

fn check_courant(max_alpha: f64, grid: &StateGrid, n: usize) -> Result<f64> {
    let courant = max_alpha * grid.dt() / grid.da();
    if courant > 1.0 + 1e-12 {
        return Err(Error::GridTooCoarse(format!(
            "capacity Courant number {courant:.3} > 1 at step {n}; refine time steps or widen Δa"
        )));
    }
    Ok(courant)
}

/// Parameters of the x-Hamiltonian on one a-line at one time level.
#[derive(Clone, Copy)]
pub(crate) struct LineModel {
    /// h_t + a, the control-free part of the drift.
    pub base_drift: f64,
    pub price: f64,
    pub zeta: f64,
    pub gamma: f64,
    pub upsilon: f64,
}

impl LineModel {
    pub fn new(params: &SubPopulationParams, h: f64, a: f64, price: f64) -> Self {
        LineModel {
            base_drift: h + a,
            price,
            zeta: params.zeta,
            gamma: params.gamma,
            upsilon: params.upsilon(),
        }
    }

    pub fn at(
        params: &SubPopulationParams,
        grid: &StateGrid,
        price: &PricePath,
        n: usize,
        l: usize,
    ) -> Self {
        LineModel::new(params, params.baseline.at_step(n), grid.a(l), price.at(n))
    }

    /// Drift h + a + g + Γ under the controls that are optimal for gradient p.
    #[inline]
    pub fn drift(&self, p: f64) -> f64 {
        self.base_drift - self.upsilon * p - self.price / self.gamma
    }

    /// Running cost ζ/2 g² + γ/2 Γ² + SΓ of the controls optimal for gradient p.
    #[inline]
    pub fn running(&self, p: f64) -> f64 {
        let g = -p / self.zeta;
        let gam = -(p + self.price) / self.gamma;
        0.5 * self.zeta * g * g + 0.5 * self.gamma * gam * gam + self.price * gam
    }

    /// Policy minimising L(u) + b(u)⁺p⁺ + b(u)⁻p⁻, returned as (drift, running cost).
    #[inline]
    pub fn upwind_policy(&self, p_plus: f64, p_minus: f64) -> (f64, f64) {
        let mut best = {
            // b = 0 exactly: minimise the cost subject to g + Γ = −(h + a).
            let mu = (self.price / self.gamma - self.base_drift) / self.upsilon;
            let g = mu / self.zeta;
            let gam = (mu - self.price) / self.gamma;
            let cost = 0.5 * self.zeta * g * g + 0.5 * self.gamma * gam * gam + self.price * gam;
            (cost, 0.0, cost)
        };
        let b = self.drift(p_plus);
        if b >= 0.0 {
            let l = self.running(p_plus);
            let h = l + b * p_plus;
            if h < best.0 {
                best = (h, b, l);
            }
        }
        let b = self.drift(p_minus);
        if b <= 0.0 {
            let l = self.running(p_minus);
            let h = l + b * p_minus;
            if h < best.0 {
                best = (h, b, l);
            }
        }
        (best.1, best.2)
    }

    /// Row (lower, diag, upper, source) of the discrete x-generator at an
    /// interior node under the policy read off `v`: L[v]_j = lower·v_{j−1} +
    /// diag·v_j + upper·v_{j+1} + source.
    #[inline]
    fn generator_row(&self, v: &[f64], j: usize, central: bool, dx: f64, d2: f64) -> [f64; 4] {
        if central {
            let p = (v[j + 1] - v[j - 1]) / (2.0 * dx);
            let c = self.drift(p) / (2.0 * dx);
            [d2 - c, -2.0 * d2, d2 + c, self.running(p)]
        } else {
            let pp = (v[j + 1] - v[j]) / dx;
            let pm = (v[j] - v[j - 1]) / dx;
            let (b, run) = self.upwind_policy(pp, pm);
            let (up, lo) = if b > 0.0 {
                (b / dx, 0.0)
            } else {
                (0.0, -b / dx)
            };
            [d2 + lo, -2.0 * d2 - up - lo, d2 + up, run]
        }
    }
}

/// Centred drift is monotone when the cell Péclet number is at most one.
#[inline]
pub(crate) fn is_central(drift: f64, dx: f64, sigma: f64) -> bool {
    drift.abs() * dx <= sigma * sigma
}

/// Central/upwind flags of one line, fixed from the later slice.
fn central_flags(model: &LineModel, next_line: &[f64], dx: f64, sigma: f64) -> Vec<bool> {
    let nx = next_line.len();
    (0..nx)
        .map(|j| {
            if j == 0 || j + 1 == nx {
                return false;
            }
            let p = (next_line[j + 1] - next_line[j - 1]) / (2.0 * dx);
            is_central(model.drift(p), dx, sigma)
        })
        .collect()
}

/// Per-line data of one backward step.
struct LineSetup {
    model: LineModel,
    central: Vec<bool>,
    /// V^{n+1} + (1−θ)Δt L[V^{n+1}].
    explicit: Vec<f64>,
}

fn line_setup(
    n: usize,
    l: usize,
    params: &SubPopulationParams,
    price: &PricePath,
    grid: &StateGrid,
    next_line: &[f64],
    theta: f64,
) -> LineSetup {
    let dx = grid.dx();
    let dt = grid.dt();
    let d2 = 0.5 * params.sigma * params.sigma / (dx * dx);
    let model = LineModel::at(params, grid, price, n, l);
    let central = central_flags(&model, next_line, dx, params.sigma);
    let mut explicit = next_line.to_vec();
    if theta < 1.0 {
        let w = (1.0 - theta) * dt;
        for j in 1..next_line.len() - 1 {
            let [lo, di, up, src] = model.generator_row(next_line, j, central[j], dx, d2);
            explicit[j] +=
                w * (lo * next_line[j - 1] + di * next_line[j] + up * next_line[j + 1] + src);
        }
    }
    LineSetup {
        model,
        central,
        explicit,
    }
}

/// Howard iteration for (I − θΔt L)V = rhs on one line, with lagged-slope
/// boundary rows taken from `next_line`.
#[allow(clippy::too_many_arguments)]
fn implicit_solve(
    setup: &LineSetup,
    rhs: &[f64],
    next_line: &[f64],
    guess: &mut [f64],
    theta: f64,
    grid: &StateGrid,
    sigma: f64,
    opts: &SolverOptions,
    n: usize,
    l: usize,
) -> Result<usize> {
    let nx = grid.nx;
    let dx = grid.dx();
    let w = theta * grid.dt();
    let d2 = 0.5 * sigma * sigma / (dx * dx);
    let mut tri = TriSystem::new(nx);
    let mut iterations = 0;
    loop {
        iterations += 1;
        tri.set(0, 0.0, 1.0, -1.0, -(next_line[2] - next_line[1]));
        tri.set(
            nx - 1,
            -1.0,
            1.0,
            0.0,
            next_line[nx - 2] - next_line[nx - 3],
        );
        for j in 1..nx - 1 {
            let [lo, di, up, src] = setup
                .model
                .generator_row(guess, j, setup.central[j], dx, d2);
            tri.set(j, -w * lo, 1.0 - w * di, -w * up, rhs[j] + w * src);
        }
        let solved = tri.solve();
        let mut diff: f64 = 0.0;
        let mut scale: f64 = 1.0;
        for (a, b) in solved.iter().zip(guess.iter()) {
            diff = diff.max((a - b).abs());
            scale = scale.max(a.abs());
        }
        guess.copy_from_slice(solved);
        if diff <= opts.tol * scale {
            return Ok(iterations);
        }
        if iterations >= opts.max_iter {
            return Err(Error::NonConvergence {
                step: n,
                line: l,
                iterations,
                residual: diff,
            });
        }
    }
}

/// Predictor slice V*: the step with the capacity term frozen at V^{n+1}.
/// Returns the slice together with the step statistics.
#[allow(clippy::too_many_arguments)]
fn predictor(
    n: usize,
    params: &SubPopulationParams,
    grid: &StateGrid,
    next: &[f64],
    out: &mut [f64],
    opts: &SolverOptions,
    setups: &[LineSetup],
    ha_next: &[f64],
    theta: f64,
) -> Result<usize> {
    let nx = grid.nx;
    let dt = grid.dt();
    let iters: Vec<std::sync::atomic::AtomicUsize> =
        (0..grid.na).map(|_| Default::default()).collect();
    exec::try_for_each_chunk_mut(opts.exec, out, nx, |l, line| -> Result<()> {
        let next_line = &next[l * nx..(l + 1) * nx];
        let setup = &setups[l];
        let rhs: Vec<f64> = (0..nx)
            .map(|j| setup.explicit[j] + dt * ha_next[l * nx + j])
            .collect();
        line.copy_from_slice(next_line);
        let it = implicit_solve(
            setup,
            &rhs,
            next_line,
            line,
            theta,
            grid,
            params.sigma,
            opts,
            n,
            l,
        )?;
        iters[l].store(it, std::sync::atomic::Ordering::Relaxed);
        Ok(())
    })?;
    Ok(iters
        .iter()
        .map(|a| a.load(std::sync::atomic::Ordering::Relaxed))
        .max()
        .unwrap_or(0))
}

fn setups(
    n: usize,
    params: &SubPopulationParams,
    price: &PricePath,
    grid: &StateGrid,
    next: &[f64],
    theta: f64,
    opts: &SolverOptions,
) -> Vec<LineSetup> {
    let nx = grid.nx;
    exec::map_range(opts.exec, grid.na, |l| {
        line_setup(
            n,
            l,
            params,
            price,
            grid,
            &next[l * nx..(l + 1) * nx],
            theta,
        )
    })
}

/// The predictor slice of step n, recomputed from V^{n+1}.
pub(crate) fn predictor_slice(
    n: usize,
    params: &SubPopulationParams,
    price: &PricePath,
    grid: &StateGrid,
    next: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<f64>> {
    let (theta, _) = step_weights(opts.scheme, n, grid.nt);
    let setups = setups(n, params, price, grid, next, theta, opts);
    let (ha_next, _) = a_hamiltonian(next, grid, params.beta, a_order(opts.scheme));
    let mut out = vec![0.0; next.len()];
    predictor(
        n, params, grid, next, &mut out, opts, &setups, &ha_next, theta,
    )?;
    Ok(out)
}

/// One backward step: fills `current` (slice n) from `next` (slice n+1).
pub(super) fn step(
    n: usize,
    params: &SubPopulationParams,
    price: &PricePath,
    grid: &StateGrid,
    next: &[f64],
    current: &mut [f64],
    opts: &SolverOptions,
) -> Result<StepStats> {
    let nx = grid.nx;
    let dt = grid.dt();
    let (theta, corrector) = step_weights(opts.scheme, n, grid.nt);
    let setups = setups(n, params, price, grid, next, theta, opts);
    let upwind_nodes = setups
        .iter()
        .map(|s| s.central[1..nx - 1].iter().filter(|c| !**c).count())
        .sum();
    let order = a_order(opts.scheme);
    let (ha_next, max_alpha) = a_hamiltonian(next, grid, params.beta, order);
    let mut max_courant = check_courant(max_alpha, grid, n)?;
    let mut iterations = predictor(
        n, params, grid, next, current, opts, &setups, &ha_next, theta,
    )?;
    if corrector {
        let (ha_star, max_alpha) = a_hamiltonian(current, grid, params.beta, order);
        max_courant = max_courant.max(check_courant(max_alpha, grid, n)?);
        let iters: Vec<std::sync::atomic::AtomicUsize> =
            (0..grid.na).map(|_| Default::default()).collect();
        exec::try_for_each_chunk_mut(opts.exec, current, nx, |l, line| -> Result<()> {
            let setup = &setups[l];
            let rhs: Vec<f64> = (0..nx)
                .map(|j| {
                    let i = l * nx + j;
                    setup.explicit[j] + 0.5 * dt * (ha_next[i] + ha_star[i])
                })
                .collect();
            let next_line = &next[l * nx..(l + 1) * nx];
            let it = implicit_solve(
                setup,
                &rhs,
                next_line,
                line,
                theta,
                grid,
                params.sigma,
                opts,
                n,
                l,
            )?;
            iters[l].store(it, std::sync::atomic::Ordering::Relaxed);
            Ok(())
        })?;
        iterations = iterations.max(
            iters
                .iter()
                .map(|a| a.load(std::sync::atomic::Ordering::Relaxed))
                .max()
                .unwrap_or(0),
        );
    }
    Ok(StepStats {
        iterations,
        upwind_nodes,
        max_courant,
    })
}

/// Tridiagonal system solved with the Thomas algorithm.
pub(crate) struct TriSystem {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    rhs: Vec<f64>,
    scratch: Vec<f64>,
}

impl TriSystem {
    pub fn new(n: usize) -> Self {
        TriSystem {
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
            rhs: vec![0.0; n],
            scratch: vec![0.0; n],
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, lower: f64, diag: f64, upper: f64, rhs: f64) {
        self.lower[i] = lower;
        self.diag[i] = diag;
        self.upper[i] = upper;
        self.rhs[i] = rhs;
    }

    /// Solves in place; the solution is left in (and returned from) `rhs`.
    pub fn solve(&mut self) -> &[f64] {
        let n = self.diag.len();
        let c = &mut self.scratch;
        let d = &mut self.rhs;
        c[0] = self.upper[0] / self.diag[0];
        d[0] /= self.diag[0];
        for i in 1..n {
            let m = self.diag[i] - self.lower[i] * c[i - 1];
            c[i] = self.upper[i] / m;
            d[i] = (d[i] - self.lower[i] * d[i - 1]) / m;
        }
        for i in (0..n - 1).rev() {
            d[i] -= c[i] * d[i + 1];
        }
        &self.rhs
    }
}

/// ∂_x of one slice: central inside, one-sided at the boundaries.
pub(crate) fn x_gradient(grid: &StateGrid, v: &[f64], out: &mut [f64]) {
    let nx = grid.nx;
    let dx = grid.dx();
    for l in 0..grid.na {
        let row = &v[l * nx..(l + 1) * nx];
        let o = &mut out[l * nx..(l + 1) * nx];
        o[0] = (row[1] - row[0]) / dx;
        for j in 1..nx - 1 {
            o[j] = (row[j + 1] - row[j - 1]) / (2.0 * dx);
        }
        o[nx - 1] = (row[nx - 1] - row[nx - 2]) / dx;
    }
}

/// ∂_a of one slice: central inside, second-order one-sided at the
/// boundaries (first order when na = 2).
pub(super) fn a_gradient(grid: &StateGrid, v: &[f64], out: &mut [f64]) {
    let nx = grid.nx;
    let na = grid.na;
    let da = grid.da();
    let at = |l: usize, j: usize| v[l * nx + j];
    for j in 0..nx {
        for l in 0..na {
            out[l * nx + j] = if na == 2 {
                (at(1, j) - at(0, j)) / da
            } else if l == 0 {
                (-3.0 * at(0, j) + 4.0 * at(1, j) - at(2, j)) / (2.0 * da)
            } else if l + 1 == na {
                (3.0 * at(l, j) - 4.0 * at(l - 1, j) + at(l - 2, j)) / (2.0 * da)
            } else {
                (at(l + 1, j) - at(l - 1, j)) / (2.0 * da)
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thomas_solves_known_system() {
        let mut t = TriSystem::new(3);
        t.set(0, 0.0, 2.0, -1.0, 1.0);
        t.set(1, -1.0, 2.0, -1.0, 0.0);
        t.set(2, -1.0, 2.0, 0.0, 1.0);
        let x = t.solve().to_vec();
        for v in x {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn upwind_policy_matches_brute_force() {
        let model = LineModel {
            base_drift: 0.7,
            price: 0.8,
            zeta: 1.3,
            gamma: 0.9,
            upsilon: 1.0 / 0.9 + 1.0 / 1.3,
        };
        for &(pp, pm) in &[
            (-1.0, -1.2),
            (-0.2, -2.0),
            (0.5, 0.4),
            (-3.0, -0.1),
            (1.0, -1.0),
        ] {
            let (b, l) = model.upwind_policy(pp, pm);
            let h = l + b.max(0.0) * pp + b.min(0.0) * pm;
            let mut best = f64::INFINITY;
            for i in 0..=400 {
                for k in 0..=400 {
                    let g = -4.0 + 8.0 * i as f64 / 400.0;
                    let gam = -4.0 + 8.0 * k as f64 / 400.0;
                    let b = model.base_drift + g + gam;
                    let v = 0.5 * model.zeta * g * g
                        + 0.5 * model.gamma * gam * gam
                        + model.price * gam
                        + b.max(0.0) * pp
                        + b.min(0.0) * pm;
                    best = best.min(v);
                }
            }
            assert!(
                h <= best + 1e-12,
                "policy value {h} above brute force {best}"
            );
            assert!(best - h < 1e-3);
        }
    }

    #[test]
    fn crank_nicolson_starts_implicit() {
        assert_eq!(step_weights(TimeScheme::CrankNicolson, 9, 10), (1.0, true));
        assert_eq!(step_weights(TimeScheme::CrankNicolson, 8, 10), (1.0, true));
        assert_eq!(step_weights(TimeScheme::CrankNicolson, 7, 10), (0.5, true));
        assert_eq!(step_weights(TimeScheme::Implicit, 7, 10), (1.0, false));
    }
}
