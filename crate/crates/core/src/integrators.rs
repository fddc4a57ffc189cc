//! Fixed-step integration of a layer's vector field `f(t, X) = F(X) + G(X, X)`.
//!
//! Steps are recorded on the tape like any other computation, so gradients
//! flow through unrolled Euler or RK4 trajectories.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blocks::{
    parallel_projection, parallel_update, BlockConfig, BlockDims, BlockParams, BlockVariant, NormVariant,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Rk4,
}

/// Right-hand side of `dX/dt = f(t, X)`, evaluated on a tape.
pub trait VectorField {
    fn eval(&mut self, tape: &mut Tape, t: f64, x: Var) -> Result<Var>;

    /// Map applied to the state after each completed step. Identity unless the
    /// field comes from a post-norm layer.
    fn project(&mut self, _tape: &mut Tape, _t: f64, x: Var) -> Result<Var> {
        Ok(x)
    }

    /// Called by [`integrate`] before each step with the step's start time.
    /// Piecewise fields use it to select their parameters for the whole step.
    fn begin_step(&mut self, _t_start: f64) {}
}

/// The vector field of one parallel transformer layer.
pub struct BlockField<'a> {
    pub params: &'a BlockParams,
    pub cfg: BlockConfig,
    pub rng: Option<&'a mut Rng>,
}

impl<'a> BlockField<'a> {
    pub fn new(params: &'a BlockParams, cfg: BlockConfig) -> Result<Self> {
        if cfg.variant != BlockVariant::Parallel {
            return Err(Error::Config("a layer vector field needs the parallel composition".into()));
        }
        Ok(Self { params, cfg, rng: None })
    }
}

impl VectorField for BlockField<'_> {
    fn eval(&mut self, tape: &mut Tape, _t: f64, x: Var) -> Result<Var> {
        parallel_update(tape, x, self.params, &self.cfg, self.rng.as_deref_mut())
    }

    fn project(&mut self, tape: &mut Tape, _t: f64, x: Var) -> Result<Var> {
        parallel_projection(tape, x, self.params, &self.cfg)
    }
}

/// Depth-wise shared layers as one time-dependent field: on `[m, m+1)` the
/// parameters are `sets[share_map[m]]`.
pub struct SharedLayerField<'a> {
    sets: Vec<&'a BlockParams>,
    share_map: Vec<usize>,
    cfg: BlockConfig,
    current: usize,
}

impl<'a> SharedLayerField<'a> {
    pub fn new(sets: Vec<&'a BlockParams>, share_map: Vec<usize>, cfg: BlockConfig) -> Result<Self> {
        if cfg.variant != BlockVariant::Parallel {
            return Err(Error::Config("a layer vector field needs the parallel composition".into()));
        }
        if share_map.is_empty() || share_map.iter().any(|&i| i >= sets.len()) {
            return Err(Error::Config("share map refers to a missing parameter set".into()));
        }
        let current = share_map[0];
        Ok(Self { sets, share_map, cfg, current })
    }

    pub fn layer_at(&self, t: f64) -> usize {
        let m = (t + 1e-9).floor().max(0.0) as usize;
        self.share_map[m.min(self.share_map.len() - 1)]
    }
}

impl VectorField for SharedLayerField<'_> {
    fn eval(&mut self, tape: &mut Tape, _t: f64, x: Var) -> Result<Var> {
        parallel_update(tape, x, self.sets[self.current], &self.cfg, None)
    }

    fn project(&mut self, tape: &mut Tape, _t: f64, x: Var) -> Result<Var> {
        parallel_projection(tape, x, self.sets[self.current], &self.cfg)
    }

    fn begin_step(&mut self, t_start: f64) {
        self.current = self.layer_at(t_start);
    }
}

/// A field given by a plain function of the current value, for tests and
/// convergence studies.
pub struct FnField<F>(pub F);

impl<F> VectorField for FnField<F>
where
    F: FnMut(&mut Tape, f64, Var) -> Result<Var>,
{
    fn eval(&mut self, tape: &mut Tape, t: f64, x: Var) -> Result<Var> {
        (self.0)(tape, t, x)
    }
}

fn axpy(tape: &mut Tape, x: Var, a: f64, k: Var) -> Result<Var> {
    let k = if a == 1.0 { k } else { tape.scale(k, a) };
    tape.add(x, k)
}

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("step size must be positive, got {h}")))
    }
}

/// `X + h·f(t, X)`, then the field's projection.
pub fn euler_step(tape: &mut Tape, f: &mut dyn VectorField, x: Var, t: f64, h: f64) -> Result<Var> {
    euler_step_scaled(tape, f, x, t, h, 1.0)
}

/// Euler step whose increment is additionally multiplied by `update_scale`.
pub fn euler_step_scaled(
    tape: &mut Tape,
    f: &mut dyn VectorField,
    x: Var,
    t: f64,
    h: f64,
    update_scale: f64,
) -> Result<Var> {
    check_step(h)?;
    let k = f.eval(tape, t, x)?;
    let y = axpy(tape, x, h * update_scale, k)?;
    f.project(tape, t + h, y)
}

/// Classical fourth-order Runge-Kutta. All four stages use the same field
/// parameters and re-evaluate the full field on the intermediate state.
pub fn rk4_step(tape: &mut Tape, f: &mut dyn VectorField, x: Var, t: f64, h: f64) -> Result<Var> {
    rk4_step_scaled(tape, f, x, t, h, 1.0)
}

pub fn rk4_step_scaled(
    tape: &mut Tape,
    f: &mut dyn VectorField,
    x: Var,
    t: f64,
    h: f64,
    update_scale: f64,
) -> Result<Var> {
    check_step(h)?;
    let half = h / 2.0;
    let k1 = f.eval(tape, t, x)?;
    let x2 = axpy(tape, x, half, k1)?;
    let k2 = f.eval(tape, t + half, x2)?;
    let x3 = axpy(tape, x, half, k2)?;
    let k3 = f.eval(tape, t + half, x3)?;
    let x4 = axpy(tape, x, h, k3)?;
    let k4 = f.eval(tape, t + h, x4)?;

    let k2x2 = tape.scale(k2, 2.0);
    let k3x2 = tape.scale(k3, 2.0);
    let s = tape.add(k1, k2x2)?;
    let s = tape.add(s, k3x2)?;
    let s = tape.add(s, k4)?;
    let mean = tape.div_scalar(s, 6.0);
    let y = axpy(tape, x, h * update_scale, mean)?;
    f.project(tape, t + h, y)
}

pub fn step(tape: &mut Tape, scheme: Scheme, f: &mut dyn VectorField, x: Var, t: f64, h: f64) -> Result<Var> {
    match scheme {
        Scheme::Euler => euler_step(tape, f, x, t, h),
        Scheme::Rk4 => rk4_step(tape, f, x, t, h),
    }
}

/// Integrates from `t0` to `t1` in `steps` equal steps.
pub fn integrate(
    tape: &mut Tape,
    f: &mut dyn VectorField,
    x0: Var,
    t0: f64,
    t1: f64,
    steps: usize,
    scheme: Scheme,
) -> Result<Var> {
    if steps == 0 {
        return Err(Error::Contract("integrate needs at least one step".into()));
    }
    let h = (t1 - t0) / steps as f64;
    let mut x = x0;
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        f.begin_step(t);
        x = step(tape, scheme, f, x, t, h)?;
    }
    Ok(x)
}

/// Integrates without recording gradients and returns the final value.
pub fn integrate_value(
    f: &mut dyn VectorField,
    x0: &Tensor,
    t0: f64,
    t1: f64,
    steps: usize,
    scheme: Scheme,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(x0.clone());
    let y = integrate(&mut tape, f, x, t0, t1, steps, scheme)?;
    Ok(tape.value(y).clone())
}

/// Result of a convergence-order measurement.
#[derive(Clone, Debug, PartialEq)]
pub enum Order {
    /// Least-squares slope of `log(error)` against `log(h)`.
    Slope { slope: f64, steps: Vec<f64>, errors: Vec<f64> },
    /// The scheme reproduced the reference to rounding at every step size.
    Exact,
}

impl Order {
    pub fn slope(&self) -> Option<f64> {
        match self {
            Order::Slope { slope, .. } => Some(*slope),
            Order::Exact => None,
        }
    }
}

/// Step counts used by [`measure_order`]: `h = horizon / n`.
pub const ORDER_STEP_COUNTS: [usize; 4] = [1, 2, 4, 8];

/// Measures the global convergence order of `scheme` on `[0, horizon]`.
///
/// Errors are taken against an RK4 reference at `h_min / 16`, for steps
/// `h = horizon·{1, 1/2, 1/4, 1/8}`.
pub fn measure_order(f: &mut dyn VectorField, scheme: Scheme, x0: &Tensor, horizon: f64) -> Result<Order> {
    check_step(horizon)?;
    let n_max = *ORDER_STEP_COUNTS.last().expect("non-empty");
    let reference = integrate_value(f, x0, 0.0, horizon, n_max * 16, Scheme::Rk4)?;
    if !reference.is_finite() {
        return Err(Error::Divergence("reference trajectory is not finite".into()));
    }
    let scale = 1.0 + reference.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut steps = Vec::new();
    let mut errors = Vec::new();
    for &n in &ORDER_STEP_COUNTS {
        let y = integrate_value(f, x0, 0.0, horizon, n, scheme)?;
        if !y.is_finite() {
            return Err(Error::Divergence(format!("trajectory with {n} steps is not finite")));
        }
        steps.push(horizon / n as f64);
        errors.push(y.max_abs_diff(&reference));
    }
    if errors.iter().all(|&e| e <= 64.0 * f64::EPSILON * scale) {
        return Ok(Order::Exact);
    }
    if errors.contains(&0.0) {
        return Err(Error::Divergence("zero error at some but not all step sizes".into()));
    }
    let xs: Vec<f64> = steps.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(Order::Slope { slope: sxy / sxx, steps, errors })
}

/// A parallel layer with fixed parameter values. Unlike [`BlockField`] it is not
/// tied to one tape: constants are bound on whichever tape evaluates it.
pub struct FrozenBlockField {
    pub params: BlockParams<Tensor>,
    pub cfg: BlockConfig,
}

impl FrozenBlockField {
    pub fn new(params: BlockParams<Tensor>, cfg: BlockConfig) -> Result<Self> {
        if cfg.variant != BlockVariant::Parallel {
            return Err(Error::Config("a layer vector field needs the parallel composition".into()));
        }
        Ok(Self { params, cfg: BlockConfig { training: false, ..cfg } })
    }

    /// Random parameters (entries of size `scale`) for `dims`.
    pub fn random(dims: BlockDims, norm: NormVariant, scale: f64, rng: &mut Rng) -> Result<Self> {
        let params = BlockParams::random(dims, scale, rng)?;
        Self::new(params, BlockConfig::new(BlockVariant::Parallel, norm))
    }
}

impl VectorField for FrozenBlockField {
    fn eval(&mut self, tape: &mut Tape, _t: f64, x: Var) -> Result<Var> {
        let p = self.params.bind_const(tape);
        parallel_update(tape, x, &p, &self.cfg, None)
    }

    fn project(&mut self, tape: &mut Tape, _t: f64, x: Var) -> Result<Var> {
        let p = self.params.bind_const(tape);
        parallel_projection(tape, x, &p, &self.cfg)
    }
}

/// Integration horizon used for order measurements; short enough that the
/// coarsest step is already in the asymptotic regime.
pub const ORDER_HORIZON: f64 = 0.25;

/// `f(X) = λX`.
pub fn linear_field(lambda: f64) -> FnField<impl FnMut(&mut Tape, f64, Var) -> Result<Var>> {
    FnField(move |tape: &mut Tape, _t: f64, x: Var| Ok(tape.scale(x, lambda)))
}
