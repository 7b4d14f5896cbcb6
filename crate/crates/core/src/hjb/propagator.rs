use super::scheme::{
    a_order, a_stencil, alpha_choice, is_central, predictor_slice, step_weights, x_gradient,
    LineModel,
};
use super::FeedbackSolution;
use crate::model::StateGrid;
use crate::Result;

/// Tridiagonal matrix stored by diagonals.
#[derive(Debug, Clone)]
pub struct TriDiag {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl TriDiag {
    pub fn identity(n: usize) -> Self {
        TriDiag {
            lower: vec![0.0; n],
            diag: vec![1.0; n],
            upper: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut s = self.diag[i] * y[i];
                if i > 0 {
                    s += self.lower[i] * y[i - 1];
                }
                if i + 1 < n {
                    s += self.upper[i] * y[i + 1];
                }
                s
            })
            .collect()
    }

    pub fn apply_transpose(&self, m: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut s = self.diag[i] * m[i];
                if i > 0 {
                    s += self.upper[i - 1] * m[i - 1];
                }
                if i + 1 < n {
                    s += self.lower[i + 1] * m[i + 1];
                }
                s
            })
            .collect()
    }

    /// Solves A z = rhs.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        thomas(&self.lower, &self.diag, &self.upper, rhs)
    }

    /// Solves Aᵀ z = rhs.
    pub fn solve_transpose(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.len();
        let lower: Vec<f64> = (0..n)
            .map(|i| if i > 0 { self.upper[i - 1] } else { 0.0 })
            .collect();
        let upper: Vec<f64> = (0..n)
            .map(|i| if i + 1 < n { self.lower[i + 1] } else { 0.0 })
            .collect();
        thomas(&lower, &self.diag, &upper, rhs)
    }

    /// I + w·self.
    fn shifted(&self, w: f64) -> TriDiag {
        TriDiag {
            lower: self.lower.iter().map(|v| w * v).collect(),
            diag: self.diag.iter().map(|v| 1.0 + w * v).collect(),
            upper: self.upper.iter().map(|v| w * v).collect(),
        }
    }
}

fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = rhs.to_vec();
    c[0] = upper[0] / diag[0];
    d[0] /= diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c[i - 1];
        c[i] = upper[i] / m;
        d[i] = (d[i] - lower[i] * d[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    d
}

/// Linearised x-generator acting on Y^X along one a-line: the drift is
/// evaluated at the mean of the neighbouring gradients, which makes it the
/// exact difference of the quadratic Hamiltonian. Boundary rows are zero.
fn x_generator(model: &LineModel, y: &[f64], dx: f64, sigma: f64) -> TriDiag {
    let nx = y.len();
    let d2 = 0.5 * sigma * sigma / (dx * dx);
    let mut op = TriDiag {
        lower: vec![0.0; nx],
        diag: vec![0.0; nx],
        upper: vec![0.0; nx],
    };
    for j in 1..nx - 1 {
        let b = model.drift(0.5 * (y[j + 1] + y[j - 1]));
        if is_central(b, dx, sigma) {
            let c = b / (2.0 * dx);
            op.lower[j] = d2 - c;
            op.diag[j] = -2.0 * d2;
            op.upper[j] = d2 + c;
        } else {
            let (up, lo) = if b > 0.0 {
                (b / dx, 0.0)
            } else {
                (0.0, -b / dx)
            };
            op.lower[j] = d2 + lo;
            op.diag[j] = -2.0 * d2 - up - lo;
            op.upper[j] = d2 + up;
        }
    }
    op
}

/// Capacity transport increment D: (D Y)_{j,l} = Σ_k c_k Y_{j,idx_k}.
#[derive(Debug, Clone)]
pub struct ATransport {
    pub idx: Vec<[usize; 3]>,
    pub coef: Vec<[f64; 3]>,
}

impl ATransport {
    /// Built from the value slice whose capacity Hamiltonian enters the step.
    pub fn from_values(v: &[f64], grid: &StateGrid, beta: f64, order: usize) -> Self {
        let nx = grid.nx;
        let na = grid.na;
        let w = grid.dt() / grid.da();
        let len = grid.slice_len();
        let mut idx = vec![[0; 3]; len];
        let mut coef = vec![[0.0; 3]; len];
        for l in 0..na {
            for j in 1..nx - 1 {
                let i = l * nx + j;
                let (a1, d1, _) = alpha_choice(v, grid, j + 1, l, beta, order);
                let (a0, d0, _) = alpha_choice(v, grid, j - 1, l, beta, order);
                let abar = 0.5 * (a1 + a0);
                let dir = if d1 == d0 {
                    d1
                } else if abar > 0.0 {
                    1
                } else if abar < 0.0 {
                    -1
                } else {
                    0
                };
                if dir == 0 {
                    continue;
                }
                let (ix, wt) = a_stencil(l, na, dir, order);
                idx[i] = ix;
                coef[i] = [w * abar * wt[0], w * abar * wt[1], w * abar * wt[2]];
            }
        }
        ATransport { idx, coef }
    }

    pub fn delta(&self, nx: usize, y: &[f64]) -> Vec<f64> {
        (0..y.len())
            .map(|i| {
                let j = i % nx;
                let (ix, c) = (&self.idx[i], &self.coef[i]);
                c[0] * y[ix[0] * nx + j] + c[1] * y[ix[1] * nx + j] + c[2] * y[ix[2] * nx + j]
            })
            .collect()
    }

    /// out += scale·Dᵀ m.
    pub fn add_delta_transpose(&self, nx: usize, m: &[f64], scale: f64, out: &mut [f64]) {
        for (i, &mi) in m.iter().enumerate() {
            let j = i % nx;
            for k in 0..3 {
                let c = self.coef[i][k];
                if c != 0.0 {
                    out[self.idx[i][k] * nx + j] += scale * c * mi;
                }
            }
        }
    }
}

/// The linear map Y^{n+1} ↦ Y^n satisfied by the discrete gradient of the
/// backward step. Its transpose moves a state distribution forward.
#[derive(Debug, Clone)]
pub struct StepPropagator {
    nx: usize,
    /// I − θΔt L(Y^n), per a-line.
    implicit: Vec<TriDiag>,
    /// I + (1−θ)Δt L(Y^{n+1}), per a-line; `None` when θ = 1.
    explicit: Option<Vec<TriDiag>>,
    transport_next: ATransport,
    /// Predictor stage: its implicit operator and transport.
    predictor: Option<(Vec<TriDiag>, ATransport)>,
}

impl StepPropagator {
    pub fn new(sol: &FeedbackSolution, n: usize) -> Result<Self> {
        let grid = &sol.grid;
        let nx = grid.nx;
        let dt = grid.dt();
        let dx = grid.dx();
        let sigma = sol.params.sigma;
        let (theta, corrector) = step_weights(sol.options.scheme, n, grid.nt);
        let model = |l| LineModel::at(&sol.params, grid, &sol.price, n, l);
        let lines = |y: &[f64], w: f64| -> Vec<TriDiag> {
            (0..grid.na)
                .map(|l| x_generator(&model(l), &y[l * nx..(l + 1) * nx], dx, sigma).shifted(w))
                .collect()
        };
        let implicit = lines(sol.slice_yx(n), -theta * dt);
        let explicit = (theta < 1.0).then(|| lines(sol.slice_yx(n + 1), (1.0 - theta) * dt));
        let order = a_order(sol.options.scheme);
        let transport_next =
            ATransport::from_values(sol.slice_v(n + 1), grid, sol.params.beta, order);
        let predictor = if corrector {
            let v_star = predictor_slice(
                n,
                &sol.params,
                &sol.price,
                grid,
                sol.slice_v(n + 1),
                &sol.options,
            )?;
            let mut y_star = vec![0.0; v_star.len()];
            x_gradient(grid, &v_star, &mut y_star);
            Some((
                lines(&y_star, -theta * dt),
                ATransport::from_values(&v_star, grid, sol.params.beta, order),
            ))
        } else {
            None
        };
        Ok(StepPropagator {
            nx,
            implicit,
            explicit,
            transport_next,
            predictor,
        })
    }

    fn per_line(
        ops: &[TriDiag],
        nx: usize,
        y: &[f64],
        f: impl Fn(&TriDiag, &[f64]) -> Vec<f64>,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(y.len());
        for (l, op) in ops.iter().enumerate() {
            out.extend(f(op, &y[l * nx..(l + 1) * nx]));
        }
        out
    }

    fn explicit_apply(&self, y: &[f64]) -> Vec<f64> {
        match &self.explicit {
            Some(ops) => Self::per_line(ops, self.nx, y, TriDiag::apply),
            None => y.to_vec(),
        }
    }

    fn explicit_transpose(&self, m: &[f64]) -> Vec<f64> {
        match &self.explicit {
            Some(ops) => Self::per_line(ops, self.nx, m, TriDiag::apply_transpose),
            None => m.to_vec(),
        }
    }

    /// Y^n from Y^{n+1}.
    pub fn apply(&self, y_next: &[f64]) -> Vec<f64> {
        let nx = self.nx;
        let by = self.explicit_apply(y_next);
        let dy = self.transport_next.delta(nx, y_next);
        let rhs: Vec<f64> = match &self.predictor {
            None => by.iter().zip(&dy).map(|(b, d)| b + d).collect(),
            Some((ops, transport)) => {
                let stage: Vec<f64> = by.iter().zip(&dy).map(|(b, d)| b + d).collect();
                let y_star = Self::per_line(ops, nx, &stage, TriDiag::solve);
                let ds = transport.delta(nx, &y_star);
                (0..by.len())
                    .map(|i| by[i] + 0.5 * dy[i] + 0.5 * ds[i])
                    .collect()
            }
        };
        Self::per_line(&self.implicit, nx, &rhs, TriDiag::solve)
    }

    /// Distribution at n+1 from the distribution at n (the transpose of [`apply`]).
    ///
    /// [`apply`]: StepPropagator::apply
    pub fn apply_transpose(&self, m: &[f64]) -> Vec<f64> {
        let nx = self.nx;
        let z = Self::per_line(&self.implicit, nx, m, TriDiag::solve_transpose);
        let mut out = self.explicit_transpose(&z);
        match &self.predictor {
            None => self
                .transport_next
                .add_delta_transpose(nx, &z, 1.0, &mut out),
            Some((ops, transport)) => {
                self.transport_next
                    .add_delta_transpose(nx, &z, 0.5, &mut out);
                let mut v = vec![0.0; z.len()];
                transport.add_delta_transpose(nx, &z, 0.5, &mut v);
                let u = Self::per_line(ops, nx, &v, TriDiag::solve_transpose);
                let bu = self.explicit_transpose(&u);
                for (o, b) in out.iter_mut().zip(&bu) {
                    *o += b;
                }
                self.transport_next
                    .add_delta_transpose(nx, &u, 1.0, &mut out);
            }
        }
        out
    }
}
