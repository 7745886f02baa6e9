//! Randomized verification harnesses.
//!
//! * Gradient checks compare every backward pass against central finite
//!   differences of a scalar loss, in double precision.
//! * The oracle sweep compares the DAU fast path against the explicit dense
//!   mixture filter on randomized layers.
//! * The adjoint check certifies the input-gradient rule:
//!   `<A x, g> = <x, A^T g>` for the bias-free DAU map `A`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::classic::{
    batchnorm_backward, batchnorm_forward, conv_backward, conv_forward, fc_backward, fc_forward, maxpool2_backward,
    maxpool2_forward, softmax_xent, BatchNormState, ConvParams, FcParams,
};
use crate::dau::{dau_backward, dau_forward, dau_forward_oracle, safe_interior_margin, DauLayerParams, DmuMode};
use crate::gaussian::{blur_channels, build_bank, correlate_separable};
use crate::tensor::{Real, Tensor};

pub const INTERP_TOLERANCE: f64 = 1e-3;
pub const ANALYTIC_DMU_TOLERANCE: f64 = 5e-2;
pub const ADJOINT_TOLERANCE: f64 = 1e-4;
pub const CONV_TOLERANCE: f64 = 1e-3;
pub const POOL_TOLERANCE: f64 = 1e-6;
pub const BATCHNORM_TOLERANCE: f64 = 1e-3;
pub const FC_TOLERANCE: f64 = 1e-3;
pub const SOFTMAX_TOLERANCE: f64 = 1e-5;
pub const ORACLE_TOLERANCE: f64 = 1e-5;
pub const ORACLE_INTEGER_TOLERANCE: f64 = 1e-6;

/// Finite-difference step for displacements, in pixels.
pub const MU_STEP: f64 = 1e-3;
const STEP: f64 = 1e-4;

/// Worst error over the entries of one gradient, scaled by the largest
/// reference magnitude: `max_i |a_i - b_i| / max_i max(|a_i|, |b_i|)`.
pub fn relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(reference)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        worst
    } else {
        worst / scale
    }
}

/// Central differences of `loss` with respect to `count` scalar coordinates
/// of `base`, perturbed through `perturb(copy, index, delta)`.
pub fn central_differences<P: Clone>(
    base: &P,
    count: usize,
    step: f64,
    perturb: impl Fn(&mut P, usize, f64),
    loss: impl Fn(&P) -> f64,
) -> Vec<f64> {
    (0..count)
        .map(|i| {
            let mut plus = base.clone();
            perturb(&mut plus, i, step);
            let mut minus = base.clone();
            perturb(&mut minus, i, -step);
            (loss(&plus) - loss(&minus)) / (2.0 * step)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckEntry {
    pub layer: String,
    pub class: String,
    pub instances: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckEntry {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst <= self.tolerance
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(CheckEntry::passed)
    }

    pub fn failures(&self) -> Vec<&CheckEntry> {
        self.entries.iter().filter(|e| !e.passed()).collect()
    }

    fn record(&mut self, layer: &str, class: &str, tolerance: f64, err: f64) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.layer == layer && e.class == class) {
            e.instances += 1;
            e.worst = if err.is_nan() { f64::NAN } else { e.worst.max(err) };
        } else {
            self.entries.push(CheckEntry {
                layer: layer.to_string(),
                class: class.to_string(),
                instances: 1,
                worst: err,
                tolerance,
            });
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub instances: usize,
    /// Also check the analytic displacement gradient on smooth inputs.
    pub analytic: bool,
    /// Perturbs every backward result before comparison (harness self-test).
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            analytic: true,
            corrupt: false,
        }
    }
}

fn corrupt(v: &mut [f64], on: bool) {
    if on {
        v.iter_mut().enumerate().for_each(|(i, x)| *x = *x * 1.1 + 0.01 * (i as f64 + 1.0));
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0)).expect("valid dims")
}

/// Random coordinate away from integer boundaries, so finite differences do
/// not straddle a kink of the bilinear interpolation.
fn subpixel(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    loop {
        let v: f64 = rng.random_range(-bound..bound);
        let frac = v - v.floor();
        if (0.02..0.98).contains(&frac) {
            return v;
        }
    }
}

/// Random DAU layer with sub-pixel displacements.
pub fn random_dau_layer(
    rng: &mut ChaCha8Rng,
    f: usize,
    s: usize,
    k: usize,
    sigma: f64,
    bound: f64,
) -> DauLayerParams<f64> {
    let mut p = DauLayerParams::<f64>::zeros(f, s, k, sigma, 4.0).expect("valid layer");
    for i in 0..p.num_units() {
        p.w[i] = rng.random_range(-1.0..1.0);
        p.mu[i] = [subpixel(rng, bound), subpixel(rng, bound)];
    }
    p.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    p
}

fn half_sq(y: &Tensor<f64>) -> f64 {
    0.5 * y.data().iter().map(|v| v * v).sum::<f64>()
}

fn flat_mu(mu: &[[f64; 2]]) -> Vec<f64> {
    mu.iter().flat_map(|m| [m[0], m[1]]).collect()
}

/// One DAU instance in interp mode: every parameter class against FD of
/// `0.5 * ||y||^2`.
fn check_dau_instance(rng: &mut ChaCha8Rng, report: &mut CheckReport, broken: bool) {
    let (f, s, k) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=4));
    let (h, w) = (rng.random_range(5..=8), rng.random_range(5..=8));
    let sigma = [0.4, 0.5, 0.7][rng.random_range(0..3)];
    let bank = build_bank(sigma).expect("valid sigma");
    let x = random_tensor(rng, [2, s, h, w]);
    let p = random_dau_layer(rng, f, s, k, sigma, 3.0);

    let (y, cache) = dau_forward(&x, &p, &bank).expect("valid instance");
    let g = dau_backward(&y, &cache, &p, &bank, DmuMode::Interp).expect("valid instance");
    let loss = |q: &DauLayerParams<f64>| half_sq(&dau_forward(&x, q, &bank).expect("valid").0);

    let mut dw = g.dw.clone();
    corrupt(&mut dw, broken);
    let fd = central_differences(&p, p.num_units(), STEP, |q, i, d| q.w[i] += d, loss);
    report.record("dau", "dw", INTERP_TOLERANCE, relative_error(&dw, &fd));

    let mut dmu = flat_mu(&g.dmu);
    corrupt(&mut dmu, broken);
    let fd = central_differences(&p, 2 * p.num_units(), MU_STEP, |q, i, d| q.mu[i / 2][i % 2] += d, loss);
    report.record("dau", "dmu (interp)", INTERP_TOLERANCE, relative_error(&dmu, &fd));

    let mut db = g.dbias.clone();
    corrupt(&mut db, broken);
    let fd = central_differences(&p, f, STEP, |q, i, d| q.bias[i] += d, loss);
    report.record("dau", "dbias", INTERP_TOLERANCE, relative_error(&db, &fd));

    let mut dx = g.dinput.data().to_vec();
    corrupt(&mut dx, broken);
    let fd = central_differences(
        &x,
        x.len(),
        STEP,
        |t, i, d| t.data_mut()[i] += d,
        |t| half_sq(&dau_forward(t, &p, &bank).expect("valid").0),
    );
    report.record("dau", "dinput", INTERP_TOLERANCE, relative_error(&dx, &fd));
}

/// Input smoothing for the analytic displacement check.
pub const ANALYTIC_PRESMOOTH_SIGMA: f64 = 4.0;
/// Unit width for the analytic check. Narrower Gaussians alias when sampled
/// at sub-pixel centres, so the continuous model is no longer smooth in `mu`.
pub const ANALYTIC_DAU_SIGMA: f64 = 1.0;

/// Forward pass of the continuous model: every unit is a Gaussian sampled at
/// its exact sub-pixel centre, applied as a zero-padded correlation.
/// Normalized with the same constant as the discrete bank at the origin.
pub fn dau_forward_continuous(x: &Tensor<f64>, p: &DauLayerParams<f64>) -> Tensor<f64> {
    let bank = build_bank(p.sigma).expect("valid sigma");
    let scale = bank.marginal()[bank.radius()];
    let reach = (bank.radius() + p.max_displacement.ceil() as usize + 1) as i64;
    let sampled = |m: f64| -> Vec<f64> {
        (-reach..=reach)
            .map(|d| {
                let u = d as f64 - m;
                scale * (-u * u / (2.0 * p.sigma * p.sigma)).exp()
            })
            .collect()
    };
    let [n, _, h, w] = x.dims();
    let mut y = Tensor::zeros([n, p.out_features, h, w]).expect("valid dims");
    for b in 0..n {
        for f in 0..p.out_features {
            y.plane_mut(b, f).iter_mut().for_each(|v| *v = p.bias[f]);
        }
    }
    for f in 0..p.out_features {
        for s in 0..p.in_channels {
            let plane = Tensor::from_fn([n, 1, h, w], |b, _, yy, xx| x.at(b, s, yy, xx)).expect("valid dims");
            for k in 0..p.units {
                let i = p.unit_index(f, s, k);
                if !p.active[i] {
                    continue;
                }
                let [mx, my] = p.mu[i];
                let r = correlate_separable(&plane, &sampled(mx), &sampled(my));
                for b in 0..n {
                    for (o, &v) in y.plane_mut(b, f).iter_mut().zip(r.plane(b, 0)) {
                        *o += p.w[i] * v;
                    }
                }
            }
        }
    }
    y
}

/// Analytic displacement gradient against FD of the continuous model, on
/// smooth inputs and a smooth linear loss restricted to the interior where
/// no tap leaves the map.
fn check_dau_analytic_instance(rng: &mut ChaCha8Rng, report: &mut CheckReport, broken: bool) {
    let (f, s, k) = (2, 2, rng.random_range(2..=4));
    let (h, w) = (rng.random_range(28..=32), rng.random_range(28..=32));
    let sigma = ANALYTIC_DAU_SIGMA;
    let bank = build_bank(sigma).expect("valid sigma");
    let smooth = build_bank(ANALYTIC_PRESMOOTH_SIGMA).expect("valid sigma");
    let x = blur_channels(&random_tensor(rng, [2, s, h, w]), &smooth);
    let mut proj = blur_channels(&random_tensor(rng, [2, f, h, w]), &smooth);
    let p = random_dau_layer(rng, f, s, k, sigma, 3.0);
    let m = safe_interior_margin(&p);
    for (i, v) in proj.data_mut().iter_mut().enumerate() {
        let (y, xx) = ((i / w) % h, i % w);
        if y < m || xx < m || y + m >= h || xx + m >= w {
            *v = 0.0;
        }
    }
    let (_, cache) = dau_forward(&x, &p, &bank).expect("valid instance");
    let g = dau_backward(&proj, &cache, &p, &bank, DmuMode::Analytic).expect("valid instance");
    let mut dmu = flat_mu(&g.dmu);
    corrupt(&mut dmu, broken);
    let fd = central_differences(
        &p,
        2 * p.num_units(),
        MU_STEP,
        |q, i, d| q.mu[i / 2][i % 2] += d,
        |q| dau_forward_continuous(&x, q).dot(&proj),
    );
    report.record("dau", "dmu (analytic, smooth input)", ANALYTIC_DMU_TOLERANCE, relative_error(&dmu, &fd));
}

/// `|<A x, g> - <x, A^T g>| / max(|<A x, g>|, |<x, A^T g>|)` for a random
/// bias-free DAU layer.
pub fn dau_adjoint_error(rng: &mut ChaCha8Rng) -> f64 {
    let (f, s, k) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=6));
    let (h, w) = (rng.random_range(4..=12), rng.random_range(4..=12));
    let sigma = [0.4, 0.5, 0.7][rng.random_range(0..3)];
    let bank = build_bank(sigma).expect("valid sigma");
    let mut p = random_dau_layer(rng, f, s, k, sigma, 4.0);
    p.bias.iter_mut().for_each(|b| *b = 0.0);
    let x = random_tensor(rng, [2, s, h, w]);
    let upstream = random_tensor(rng, [2, f, h, w]);
    let (y, cache) = dau_forward(&x, &p, &bank).expect("valid");
    let g = dau_backward(&upstream, &cache, &p, &bank, DmuMode::Interp).expect("valid");
    let lhs = y.dot(&upstream);
    let rhs = x.dot(&g.dinput);
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300)
}

fn check_conv_instance(rng: &mut ChaCha8Rng, report: &mut CheckReport, broken: bool) {
    let k = [1, 3, 5][rng.random_range(0..3)];
    let stride = rng.random_range(1..=2);
    let (s, f) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let mut p = ConvParams::<f64>::zeros(f, s, k, k, k / 2, stride).expect("valid");
    p.weights.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    p.bias.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let (h, w) = (rng.random_range(4..=7), rng.random_range(4..=7));
    let x = random_tensor(rng, [2, s, h, w]);
    let y = conv_forward(&x, &p).expect("valid");
    let g = conv_backward(&x, &y, &p).expect("valid");
    let loss = |q: &ConvParams<f64>| half_sq(&conv_forward(&x, q).expect("valid"));
    let mut dw = g.dweights.clone();
    corrupt(&mut dw, broken);
    let fd = central_differences(&p, p.weights.len(), STEP, |q, i, d| q.weights[i] += d, loss);
    report.record("conv", "dweights", CONV_TOLERANCE, relative_error(&dw, &fd));
    let fd = central_differences(&p, f, STEP, |q, i, d| q.bias[i] += d, loss);
    let mut db = g.dbias.clone();
    corrupt(&mut db, broken);
    report.record("conv", "dbias", CONV_TOLERANCE, relative_error(&db, &fd));
    let mut dx = g.dinput.data().to_vec();
    corrupt(&mut dx, broken);
    let fd = central_differences(
        &x,
        x.len(),
        STEP,
        |t, i, d| t.data_mut()[i] += d,
        |t| half_sq(&conv_forward(t, &p).expect("valid")),
    );
    report.record("conv", "dinput", CONV_TOLERANCE, relative_error(&dx, &fd));
}

fn check_pool_instance(rng: &mut ChaCha8Rng, report: &mut CheckReport, broken: bool) {
    // Distinct values spaced well beyond the FD step keep away from ties.
    let dims = [2, 2, rng.random_range(2..=7), rng.random_range(2..=7)];
    let mut vals: Vec<f64> = (0..dims.iter().product::<usize>()).map(|i| i as f64 * 0.01).collect();
    for i in (1..vals.len()).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    let x = Tensor::from_vec(dims, vals).expect("valid");
    let (y, cache) = maxpool2_forward(&x);
    let ones = Tensor::filled(y.dims(), 1.0).expect("valid");
    let mut dx = maxpool2_backward(&ones, &cache).expect("valid").into_vec();
    corrupt(&mut dx, broken);
    let fd = central_differences(
        &x,
        x.len(),
        STEP,
        |t, i, d| t.data_mut()[i] += d,
        |t| maxpool2_forward(t).0.data().iter().sum(),
    );
    report.record("maxpool2", "dinput", POOL_TOLERANCE, relative_error(&dx, &fd));
}

fn check_batchnorm_instance(rng: &mut ChaCha8Rng, report: &mut CheckReport, broken: bool) {
    let c = rng.random_range(1..=3);
    let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
    let x = random_tensor(rng, [3, c, h, w]);
    let mut st = BatchNormState::<f64>::new(c);
    st.scale.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
    st.shift.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    // A fixed random projection makes the loss sensitive to the normalized
    // values (0.5*||y||^2 alone is nearly flat in x after normalization).
    let proj = random_tensor(rng, x.dims());
    let loss_of = |t: &Tensor<f64>, s: &BatchNormState<f64>| {
        let mut s = s.clone();
        let y = batchnorm_forward(t, &mut s, true).expect("valid").0;
        half_sq(&y) + y.dot(&proj)
    };
    let mut st_run = st.clone();
    let (y, cache) = batchnorm_forward(&x, &mut st_run, true).expect("valid");
    let upstream = Tensor::from_vec(
        y.dims(),
        y.data().iter().zip(proj.data()).map(|(a, b)| a + b).collect(),
    )
    .expect("valid");
    let g = batchnorm_backward(&upstream, &cache, &st).expect("valid");
    let mut dx = g.dinput.data().to_vec();
    corrupt(&mut dx, broken);
    let fd = central_differences(&x, x.len(), STEP, |t, i, d| t.data_mut()[i] += d, |t| loss_of(t, &st));
    report.record("batchnorm", "dinput", BATCHNORM_TOLERANCE, relative_error(&dx, &fd));
    let mut ds = g.dscale.clone();
    corrupt(&mut ds, broken);
    let fd = central_differences(&st, c, STEP, |s, i, d| s.scale[i] += d, |s| loss_of(&x, s));
    report.record("batchnorm", "dscale", BATCHNORM_TOLERANCE, relative_error(&ds, &fd));
    let mut dh = g.dshift.clone();
    corrupt(&mut dh, broken);
    let fd = central_differences(&st, c, STEP, |s, i, d| s.shift[i] += d, |s| loss_of(&x, s));
    report.record("batchnorm", "dshift", BATCHNORM_TOLERANCE, relative_error(&dh, &fd));
}

fn check_fc_softmax_instance(rng: &mut ChaCha8Rng, report: &mut CheckReport, broken: bool) {
    let (c, h, w) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
    let classes = rng.random_range(2..=6);
    let n = 3;
    let x = random_tensor(rng, [n, c, h, w]);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let mut p = FcParams::<f64>::zeros(c * h * w, classes).expect("valid");
    p.weights.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    p.bias.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));

    let logits = fc_forward(&x, &p).expect("valid");
    let (_, dlogits) = softmax_xent(&logits, &labels).expect("valid");
    let mut dz = dlogits.data().to_vec();
    corrupt(&mut dz, broken);
    let fd = central_differences(
        &logits,
        logits.len(),
        STEP,
        |t, i, d| t.data_mut()[i] += d,
        |t| softmax_xent(t, &labels).expect("valid").0,
    );
    report.record("softmax_xent", "dlogits", SOFTMAX_TOLERANCE, relative_error(&dz, &fd));

    let g = fc_backward(&x, &dlogits, &p).expect("valid");
    let loss = |q: &FcParams<f64>| softmax_xent(&fc_forward(&x, q).expect("valid"), &labels).expect("valid").0;
    let mut dw = g.dweights.clone();
    corrupt(&mut dw, broken);
    let fd = central_differences(&p, p.weights.len(), STEP, |q, i, d| q.weights[i] += d, loss);
    report.record("fc", "dweights", FC_TOLERANCE, relative_error(&dw, &fd));
    let mut db = g.dbias.clone();
    corrupt(&mut db, broken);
    let fd = central_differences(&p, classes, STEP, |q, i, d| q.bias[i] += d, loss);
    report.record("fc", "dbias", FC_TOLERANCE, relative_error(&db, &fd));
    let mut dx = g.dinput.data().to_vec();
    corrupt(&mut dx, broken);
    let fd = central_differences(
        &x,
        x.len(),
        STEP,
        |t, i, d| t.data_mut()[i] += d,
        |t| softmax_xent(&fc_forward(t, &p).expect("valid"), &labels).expect("valid").0,
    );
    report.record("fc", "dinput", FC_TOLERANCE, relative_error(&dx, &fd));
}

/// Runs the DAU and classic-layer finite-difference suites.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = CheckReport::default();
    for _ in 0..cfg.instances {
        check_dau_instance(&mut rng, &mut report, cfg.corrupt);
        if cfg.analytic {
            check_dau_analytic_instance(&mut rng, &mut report, cfg.corrupt);
        }
        let err = dau_adjoint_error(&mut rng);
        report.record("dau", "adjoint <Ax,g> = <x,A^T g>", ADJOINT_TOLERANCE, if cfg.corrupt { err + 1.0 } else { err });
    }
    for _ in 0..cfg.instances.max(10) {
        check_conv_instance(&mut rng, &mut report, cfg.corrupt);
        check_pool_instance(&mut rng, &mut report, cfg.corrupt);
        check_batchnorm_instance(&mut rng, &mut report, cfg.corrupt);
        check_fc_softmax_instance(&mut rng, &mut report, cfg.corrupt);
    }
    report
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleCase {
    pub dims: [usize; 4],
    pub out_features: usize,
    pub units: usize,
    pub sigma: f64,
    pub integer_mu: bool,
    pub margin: usize,
    pub compared: usize,
    pub max_diff: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct OracleReport {
    pub cases: Vec<OracleCase>,
}

impl OracleReport {
    pub fn max_subpixel(&self) -> f64 {
        self.cases.iter().filter(|c| !c.integer_mu).map(|c| c.max_diff).fold(0.0, f64::max)
    }

    pub fn max_integer(&self) -> f64 {
        self.cases.iter().filter(|c| c.integer_mu).map(|c| c.max_diff).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_subpixel() <= ORACLE_TOLERANCE
            && self.max_integer() <= ORACLE_INTEGER_TOLERANCE
            && self.cases.iter().all(|c| c.compared > 0 && c.max_diff.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct OracleCheckConfig {
    pub seed: u64,
    pub cases: usize,
    pub integer_only: bool,
}

impl Default for OracleCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cases: 200,
            integer_only: false,
        }
    }
}

/// Max |fast - oracle| over the safe interior of one single-precision case.
pub fn oracle_case(rng: &mut ChaCha8Rng, integer_mu: bool) -> OracleCase {
    let (s, f, k) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=6));
    let (h, w) = (rng.random_range(9..=12), rng.random_range(9..=12));
    let sigma = [0.4, 0.5, 0.7][rng.random_range(0..3)];
    let bank = build_bank(sigma).expect("valid sigma");
    let mut p = random_dau_layer(rng, f, s, k, sigma, 4.0);
    if integer_mu {
        for m in &mut p.mu {
            *m = [m[0].round().clamp(-4.0, 4.0), m[1].round().clamp(-4.0, 4.0)];
        }
    }
    let p = p.cast::<f32>();
    let x = random_tensor(rng, [2, s, h, w]).cast::<f32>();
    let (fast, _) = dau_forward(&x, &p, &bank).expect("valid");
    let oracle = dau_forward_oracle(&x, &p, &bank).expect("valid");
    let m = safe_interior_margin(&p);
    let mut max_diff = 0.0f64;
    let mut compared = 0;
    for b in 0..2 {
        for ch in 0..f {
            for y in m..h.saturating_sub(m) {
                for xx in m..w.saturating_sub(m) {
                    let d = (fast.at(b, ch, y, xx) as f64 - oracle.at(b, ch, y, xx) as f64).abs();
                    max_diff = max_diff.max(d);
                    compared += 1;
                }
            }
        }
    }
    OracleCase {
        dims: [2, s, h, w],
        out_features: f,
        units: k,
        sigma,
        integer_mu,
        margin: m,
        compared,
        max_diff,
    }
}

/// Randomized fast-vs-oracle sweep. Unless `integer_only` is set, every
/// fourth case uses integer displacements.
pub fn run_oraclecheck(cfg: &OracleCheckConfig) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cases = (0..cfg.cases)
        .map(|i| oracle_case(&mut rng, cfg.integer_only || i % 4 == 3))
        .collect();
    OracleReport { cases }
}

/// `max |f(a x1 + b x2) - (a f(x1) + b f(x2) - (a + b - 1) bias)|` for a
/// random DAU layer.
pub fn dau_linearity_error<T: Real>(
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    alpha: T,
    beta: T,
    p: &DauLayerParams<T>,
) -> f64 {
    let bank = build_bank(p.sigma).expect("valid sigma");
    let mix = Tensor::from_vec(
        x1.dims(),
        x1.data().iter().zip(x2.data()).map(|(&a, &b)| alpha * a + beta * b).collect(),
    )
    .expect("same dims");
    let (y, _) = dau_forward(&mix, p, &bank).expect("valid");
    let (y1, _) = dau_forward(x1, p, &bank).expect("valid");
    let (y2, _) = dau_forward(x2, p, &bank).expect("valid");
    let [_, f, h, w] = y.dims();
    let mut worst = 0.0f64;
    for (i, &v) in y.data().iter().enumerate() {
        let ch = (i / (h * w)) % f;
        let expect = alpha * y1.data()[i] + beta * y2.data()[i] - (alpha + beta - T::one()) * p.bias[ch];
        worst = worst.max((v - expect).abs().as_f64());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_scaling() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 2.1], &[1.0, 2.0]) - 0.1 / 2.1).abs() < 1e-12);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn corrupted_harness_fails() {
        let report = run_gradcheck(&GradCheckConfig {
            seed: 3,
            instances: 1,
            analytic: true,
            corrupt: true,
        });
        assert!(!report.passed());
        assert!(report.failures().len() >= 10);
    }

    #[test]
    fn small_gradcheck_passes() {
        let report = run_gradcheck(&GradCheckConfig {
            seed: 11,
            instances: 3,
            analytic: true,
            corrupt: false,
        });
        for e in &report.entries {
            assert!(e.passed(), "{e:?}");
        }
    }

    #[test]
    fn continuous_forward_matches_dense_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, [1, 2, 7, 6]);
        let p = random_dau_layer(&mut rng, 2, 2, 2, 0.7, 3.0);
        let y = dau_forward_continuous(&x, &p);
        let norm = build_bank(0.7).unwrap().g_at(0, 0);
        for f in 0..2 {
            for (yy, xx) in [(0, 0), (3, 2), (6, 5)] {
                let mut acc = p.bias[f];
                for s in 0..2 {
                    for k in 0..2 {
                        let i = p.unit_index(f, s, k);
                        for sy in 0..7 {
                            for sx in 0..6 {
                                let u = sx as f64 - xx as f64 - p.mu[i][0];
                                let v = sy as f64 - yy as f64 - p.mu[i][1];
                                let g = norm * (-(u * u + v * v) / (2.0 * 0.7 * 0.7)).exp();
                                acc += p.w[i] * g * x.at(0, s, sy, sx);
                            }
                        }
                    }
                }
                assert!((y.at(0, f, yy, xx) - acc).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn small_oracle_sweep_passes() {
        let r = run_oraclecheck(&OracleCheckConfig {
            seed: 5,
            cases: 12,
            integer_only: false,
        });
        assert!(r.passed(), "{} {}", r.max_subpixel(), r.max_integer());
    }
}
