//! Finite-difference validation of the tape's backward pass.
//!
//! [`grad_check`] replays a user closure under central differences,
//! element by element, and compares against the analytic gradient from
//! [`Tape::backward`]. Errors are relative with an absolute floor so that
//! near-zero gradients do not blow the ratio up:
//!
//! ```text
//! rel = |analytic - numeric| / max(|analytic|, |numeric|, floor)
//! ```
//!
//! Large tensors are probed at a random subset of elements; the RNG is
//! seeded, so a failing probe set is reproducible.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::TensorData;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Max acceptable relative error.
    pub tol: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Probe at most this many elements per input tensor.
    pub max_probes: usize,
    /// Seed for probe-site selection.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol: 1e-3,
            floor: 1e-4,
            max_probes: 24,
            seed: 0x5eed,
        }
    }
}

/// Worst probe of a check, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct WorstProbe {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub tol: f64,
    pub worst: Option<WorstProbe>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: probes={} max_rel_err={:.3e} mean_rel_err={:.3e} tol={:.1e} {}",
            self.name,
            self.probes,
            self.max_rel_err,
            self.mean_rel_err,
            self.tol,
            if self.passed() { "ok" } else { "FAIL" }
        )?;
        if let (false, Some(w)) = (self.passed(), &self.worst) {
            write!(
                f,
                " (input {} elem {}: analytic {:.6e} vs numeric {:.6e})",
                w.input, w.element, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

fn eval<F>(f: &F, inputs: &[TensorData]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.numel(out) != 1 {
        return Err(Error::Contract(format!(
            "grad_check closure must return a scalar, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok(tape.data(out)[0])
}

/// Compare analytic and central-difference gradients of `f` at `inputs`.
/// Every input is treated as differentiable; constants belong inside the
/// closure.
pub fn grad_check<F>(name: &str, inputs: &[TensorData], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.numel(out) != 1 {
        return Err(Error::Contract(format!(
            "grad_check closure must return a scalar, got shape {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.numel(v)]))
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probes = 0usize;
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut worst = None;
    let mut work: Vec<TensorData> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let sites: Vec<usize> = if n <= opts.max_probes {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_probes).into_vec()
        };
        for &e in &sites {
            let x0 = input.data()[e];
            work[ii].data_mut()[e] = x0 + opts.eps;
            let plus = eval(&f, &work)?;
            work[ii].data_mut()[e] = x0 - opts.eps;
            let minus = eval(&f, &work)?;
            work[ii].data_mut()[e] = x0;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[ii][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            probes += 1;
            sum_rel += rel;
            if rel > max_rel {
                max_rel = rel;
                worst = Some(WorstProbe {
                    input: ii,
                    element: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        probes,
        max_rel_err: max_rel,
        mean_rel_err: if probes > 0 { sum_rel / probes as f64 } else { 0.0 },
        tol: opts.tol,
        worst,
    })
}

fn rand_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> TensorData {
    TensorData::random_uniform(&shape, lo, hi, rng)
}

/// Values guaranteed pairwise-separated by more than the FD step, so max
/// pooling cannot flip its argmax under perturbation.
fn separated_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> TensorData {
    use rand::seq::SliceRandom;
    use rand::Rng;
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut data = vec![0.0; n];
    for (i, &o) in order.iter().enumerate() {
        data[o] = i as f64 * 0.0137 + rng.random_range(-0.001..0.001);
    }
    TensorData::new(shape, data).expect("shape/data agree")
}

/// Displacement field whose sample coordinates stay away from integer grid
/// lines, where trilinear interpolation has derivative kinks that central
/// differences would straddle.
fn safe_field(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> TensorData {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let whole = rng.random_range(-1i32..=1) as f64;
            let frac = rng.random_range(0.15..0.85);
            whole + frac
        })
        .collect();
    TensorData::new(shape, data).expect("shape/data agree")
}

/// Reduce an op output to a scalar through a fixed random weighting, so the
/// check exercises every output element with a distinct sensitivity.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(v).to_vec();
    let r = tape.constant(rand_tensor(shape, -1.0, 1.0, &mut rng));
    let p = tape.mul(v, r)?;
    Ok(tape.sum_all(p))
}

type CheckFn = fn(&GradCheckOptions) -> Result<GradCheckReport>;

/// Named gradient checks covering every differentiable op, runnable from
/// tests and the `gradcheck` CLI subcommand.
pub fn op_checks() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("add", check_add),
        ("sub", check_sub),
        ("mul", check_mul),
        ("div", check_div),
        ("add_scalar", check_add_scalar),
        ("mul_scalar", check_mul_scalar),
        ("sqrt", check_sqrt),
        ("leaky_relu", check_leaky_relu),
        ("sum_all", check_sum_all),
        ("mean_all", check_mean_all),
        ("conv3d", check_conv3d),
        ("conv3d_strided", check_conv3d_strided),
        ("box_sum", check_box_sum),
        ("maxpool3d", check_maxpool3d),
        ("upsample2x", check_upsample2x),
        ("warp", check_warp),
        ("concat_slice", check_concat_slice),
        ("spatial_diff", check_spatial_diff),
    ]
}

/// Run every registered op check. Returns the reports; callers decide how
/// to render and whether a failure is fatal.
pub fn run_op_checks(opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    op_checks().into_iter().map(|(_, f)| f(opts)).collect()
}

/// The planted-fault op must be flagged; if it passes, the checker itself
/// is broken.
pub fn negative_control(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xbad);
    let x = rand_tensor(vec![1, 1, 2, 2, 2], 0.5, 1.5, &mut rng);
    grad_check("negative_control(corrupted_square)", &[x], opts, |t, v| {
        let y = t.corrupted_square(v[0]);
        weighted_sum(t, y, 11)
    })
}

fn vol(rng: &mut ChaCha8Rng) -> TensorData {
    rand_tensor(vec![1, 2, 4, 4, 4], -1.0, 1.0, rng)
}

fn check_add(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(1));
    let (a, b) = (vol(&mut rng), vol(&mut rng));
    grad_check("add", &[a, b], o, |t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, 21)
    })
}

fn check_sub(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(2));
    let (a, b) = (vol(&mut rng), vol(&mut rng));
    grad_check("sub", &[a, b], o, |t, v| {
        let y = t.sub(v[0], v[1])?;
        weighted_sum(t, y, 22)
    })
}

fn check_mul(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(3));
    let (a, b) = (vol(&mut rng), vol(&mut rng));
    grad_check("mul", &[a, b], o, |t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y, 23)
    })
}

fn check_div(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(4));
    let a = vol(&mut rng);
    // Denominator bounded away from zero on both sides of the FD step.
    let b = rand_tensor(vec![1, 2, 4, 4, 4], 0.5, 1.5, &mut rng);
    grad_check("div", &[a, b], o, |t, v| {
        let y = t.div(v[0], v[1])?;
        weighted_sum(t, y, 24)
    })
}

fn check_add_scalar(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(5));
    let a = vol(&mut rng);
    grad_check("add_scalar", &[a], o, |t, v| {
        let y = t.add_scalar(v[0], 0.77);
        weighted_sum(t, y, 25)
    })
}

fn check_mul_scalar(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(6));
    let a = vol(&mut rng);
    grad_check("mul_scalar", &[a], o, |t, v| {
        let y = t.mul_scalar(v[0], -1.3);
        weighted_sum(t, y, 26)
    })
}

fn check_sqrt(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(7));
    let a = rand_tensor(vec![1, 2, 4, 4, 4], 0.25, 2.0, &mut rng);
    grad_check("sqrt", &[a], o, |t, v| {
        let y = t.sqrt(v[0])?;
        weighted_sum(t, y, 27)
    })
}

fn check_leaky_relu(o: &GradCheckOptions) -> Result<GradCheckReport> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(8));
    // Keep activations away from the kink at zero by at least 10 FD steps.
    let n = 2 * 4 * 4 * 4;
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * rng.random_range(0.05..1.0)
        })
        .collect();
    let a = TensorData::new(vec![1, 2, 4, 4, 4], data).expect("shape/data agree");
    grad_check("leaky_relu", &[a], o, |t, v| {
        let y = t.leaky_relu(v[0], 0.1);
        weighted_sum(t, y, 28)
    })
}

fn check_sum_all(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(9));
    let a = vol(&mut rng);
    grad_check("sum_all", &[a], o, |t, v| Ok(t.sum_all(v[0])))
}

fn check_mean_all(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(10));
    let a = vol(&mut rng);
    grad_check("mean_all", &[a], o, |t, v| Ok(t.mean_all(v[0])))
}

fn check_conv3d(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(11));
    let x = rand_tensor(vec![1, 2, 4, 4, 4], -1.0, 1.0, &mut rng);
    let w = rand_tensor(vec![3, 2, 3, 3, 3], -0.5, 0.5, &mut rng);
    let b = rand_tensor(vec![3], -0.2, 0.2, &mut rng);
    grad_check("conv3d", &[x, w, b], o, |t, v| {
        let y = t.conv3d(v[0], v[1], v[2], 1, 1)?;
        weighted_sum(t, y, 31)
    })
}

fn check_conv3d_strided(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(12));
    let x = rand_tensor(vec![1, 2, 5, 5, 5], -1.0, 1.0, &mut rng);
    let w = rand_tensor(vec![2, 2, 3, 3, 3], -0.5, 0.5, &mut rng);
    let b = rand_tensor(vec![2], -0.2, 0.2, &mut rng);
    grad_check("conv3d_strided", &[x, w, b], o, |t, v| {
        let y = t.conv3d(v[0], v[1], v[2], 2, 1)?;
        weighted_sum(t, y, 32)
    })
}

fn check_box_sum(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(19));
    let x = rand_tensor(vec![1, 2, 4, 5, 4], -1.0, 1.0, &mut rng);
    grad_check("box_sum", &[x], o, |t, v| {
        let y = t.box_sum(v[0], 3)?;
        weighted_sum(t, y, 37)
    })
}

fn check_maxpool3d(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(13));
    let x = separated_tensor(vec![1, 2, 4, 4, 4], &mut rng);
    grad_check("maxpool3d", &[x], o, |t, v| {
        let y = t.maxpool3d(v[0])?;
        weighted_sum(t, y, 33)
    })
}

fn check_upsample2x(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(14));
    let x = rand_tensor(vec![1, 2, 3, 3, 3], -1.0, 1.0, &mut rng);
    grad_check("upsample2x", &[x], o, |t, v| {
        let y = t.upsample2x(v[0])?;
        weighted_sum(t, y, 34)
    })
}

fn check_warp(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(15));
    let x = rand_tensor(vec![1, 2, 5, 5, 5], -1.0, 1.0, &mut rng);
    let f = safe_field(vec![1, 3, 5, 5, 5], &mut rng);
    grad_check("warp", &[x, f], o, |t, v| {
        let y = t.warp(v[0], v[1])?;
        weighted_sum(t, y, 35)
    })
}

fn check_concat_slice(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(16));
    let a = rand_tensor(vec![1, 2, 3, 3, 3], -1.0, 1.0, &mut rng);
    let b = rand_tensor(vec![1, 1, 3, 3, 3], -1.0, 1.0, &mut rng);
    grad_check("concat_slice", &[a, b], o, |t, v| {
        let cat = t.concat_channels(v[0], v[1])?;
        let left = t.slice_channels(cat, 0, 2)?;
        let right = t.slice_channels(cat, 2, 3)?;
        let ls = weighted_sum(t, left, 36)?;
        let rs = weighted_sum(t, right, 37)?;
        let rs3 = t.mul_scalar(rs, 3.0);
        t.add(ls, rs3)
    })
}

fn check_spatial_diff(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(17));
    let x = rand_tensor(vec![1, 2, 4, 4, 4], -1.0, 1.0, &mut rng);
    grad_check("spatial_diff", &[x], o, |t, v| {
        let d0 = t.spatial_diff(v[0], 0)?;
        let d1 = t.spatial_diff(v[0], 1)?;
        let d2 = t.spatial_diff(v[0], 2)?;
        let s0 = weighted_sum(t, d0, 38)?;
        let s1 = weighted_sum(t, d1, 39)?;
        let s2 = weighted_sum(t, d2, 40)?;
        let s01 = t.add(s0, s1)?;
        t.add(s01, s2)
    })
}
