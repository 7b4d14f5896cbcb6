//! Budgeted Nelder–Mead minimisation on top of `argmin`.

use std::cell::RefCell;

use argmin::core::{CostFunction, Error as ArgminError, Executor};
use argmin::solver::neldermead::NelderMead;

/// Every objective evaluation in call order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

impl Trace {
    /// Index of the smallest value; ties resolve to the earliest evaluation.
    pub fn best(&self) -> Option<usize> {
        (0..self.values.len())
            .min_by(|&i, &j| self.values[i].total_cmp(&self.values[j]).then(i.cmp(&j)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub trace: Trace,
    /// The evaluation budget ran out before the simplex converged.
    pub exhausted: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    /// Maximum number of objective evaluations.
    pub budget: usize,
    /// Stop once the standard deviation of the simplex values falls below this.
    pub sd_tolerance: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            budget: 60,
            sd_tolerance: 1e-8,
        }
    }
}

struct Budgeted<'a, F> {
    f: RefCell<F>,
    trace: &'a RefCell<Trace>,
    budget: usize,
}

#[derive(Debug)]
struct OutOfBudget;

impl std::fmt::Display for OutOfBudget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("evaluation budget exhausted")
    }
}

impl std::error::Error for OutOfBudget {}

impl<F: FnMut(&[f64]) -> f64> CostFunction for Budgeted<'_, F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> Result<f64, ArgminError> {
        let mut t = self.trace.borrow_mut();
        if t.values.len() >= self.budget {
            return Err(OutOfBudget.into());
        }
        let v = (self.f.borrow_mut())(x);
        let v = if v.is_nan() { f64::INFINITY } else { v };
        t.points.push(x.clone());
        t.values.push(v);
        Ok(v)
    }
}

/// Minimises `f` from the simplex `x0, x0 + steps[i]·e_i`. NaN values are
/// treated as +∞.
pub fn nelder_mead<F>(f: F, x0: &[f64], steps: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let mut simplex = vec![x0.to_vec()];
    for (i, s) in steps.iter().enumerate() {
        let mut v = x0.to_vec();
        v[i] += s;
        simplex.push(v);
    }
    let trace = RefCell::new(Trace {
        points: Vec::new(),
        values: Vec::new(),
    });
    let problem = Budgeted {
        f: RefCell::new(f),
        trace: &trace,
        budget: opts.budget,
    };
    let exhausted = if opts.budget <= simplex.len() || x0.is_empty() {
        for v in simplex.iter().take(opts.budget) {
            let _ = problem.cost(v);
        }
        opts.budget < simplex.len()
    } else {
        let solver = NelderMead::new(simplex)
            .with_sd_tolerance(opts.sd_tolerance)
            .expect("non-negative tolerance");
        let run = Executor::new(problem, solver)
            .configure(|s| s.max_iters(u64::MAX))
            .run();
        match run {
            Ok(_) => false,
            Err(e) if e.downcast_ref::<OutOfBudget>().is_some() => true,
            Err(e) => panic!("Nelder-Mead failed: {e}"),
        }
    };
    let trace = trace.into_inner();
    let best = trace.best().expect("at least one evaluation");
    Minimum {
        x: trace.points[best].clone(),
        value: trace.values[best],
        trace,
        exhausted,
    }
}
