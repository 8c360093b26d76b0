//! Randomized checks of the production layers against the reference oracle,
//! finite-difference gradient checks, and algebraic identities of the
//! tropical modes. Used by the `selftest` command and the test suites.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{conv_backward, conv_forward, ConvKind, ConvParams, Dense, OuterOp, TropicalMode};
use crate::oracle::{max_relative_error, oracle_dense_grad, oracle_forward, oracle_grad, OracleError};
use crate::tensor::{PadSpec, Tensor};

pub const GRAD_EPS: f64 = 1e-5;
/// Competing sums closer than this are treated as ties and resampled. A
/// perturbation of `GRAD_EPS` moves any sum by at most `GRAD_EPS`, so gaps
/// above `2 * GRAD_EPS` keep both sides of the central difference on the
/// same linear piece.
pub const TIE_TOLERANCE: f64 = 1e-4;
pub const TROPICAL_GRAD_TOLERANCE: f64 = 1e-4;
pub const LINEAR_GRAD_TOLERANCE: f64 = 1e-6;

/// Every conv layer kind: the six tropical modes, then standard.
pub fn all_kinds() -> Vec<ConvKind> {
    TropicalMode::ALL
        .into_iter()
        .map(ConvKind::Tropical)
        .chain([ConvKind::Standard])
        .collect()
}

/// Production forward signature, swappable for negative controls.
pub type ForwardFn<'a> = &'a dyn Fn(ConvKind, &Tensor, &ConvParams) -> Result<Tensor>;

pub fn production_forward(kind: ConvKind, x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    conv_forward(kind, x, p).map(|(y, _)| y)
}

#[derive(Debug, Clone)]
pub struct ConvCase {
    pub kind: ConvKind,
    pub seed: u64,
    pub x: Tensor,
    pub params: ConvParams,
}

impl fmt::Display for ConvCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pad = self.params.pad();
        write!(
            f,
            "{} x={} k={} c_out={} stride={} pad={}{} seed={}",
            self.kind.name(),
            self.x.shape(),
            self.params.kernel_size(),
            self.params.out_channels(),
            self.params.stride(),
            pad.size,
            if self.params.bias().is_some() { " bias" } else { "" },
            self.seed
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CaseLimits {
    pub max_dim: usize,
    pub max_channels: usize,
    pub allow_padding: bool,
}

impl CaseLimits {
    pub const ORACLE: CaseLimits = CaseLimits {
        max_dim: 6,
        max_channels: 3,
        allow_padding: true,
    };
    pub const GRADIENT: CaseLimits = CaseLimits {
        max_dim: 5,
        max_channels: 3,
        allow_padding: true,
    };
}

fn draw(rng: &mut ChaCha8Rng, coarse: bool) -> f64 {
    if coarse {
        // small integers: many exact ties to exercise tie-breaking
        f64::from(rng.random_range(-3i32..=3))
    } else {
        rng.random_range(-1.0..1.0)
    }
}

/// A random case for `kind`, fully determined by `seed`. About a quarter of
/// the cases use small integer values so that ties are common; the rest are
/// continuous.
pub fn random_case(kind: ConvKind, seed: u64, limits: CaseLimits) -> ConvCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.random_range(1..=limits.max_dim);
    let w = rng.random_range(1..=limits.max_dim);
    let c_in = rng.random_range(1..=limits.max_channels);
    let c_out = rng.random_range(1..=limits.max_channels);
    let stride = rng.random_range(1..=2);
    let pad_size = if limits.allow_padding && rng.random_bool(0.5) {
        rng.random_range(1..=2)
    } else {
        0
    };
    // pad < k <= padded extent
    let k_max = (h.min(w) + 2 * pad_size).min(limits.max_dim);
    let k_min = pad_size + 1;
    let k = rng.random_range(k_min.min(k_max)..=k_max);
    let pad_size = pad_size.min(k - 1);
    let pad = if pad_size == 0 { PadSpec::NONE } else { PadSpec::value(pad_size, 0.0) };
    let coarse = rng.random_bool(0.25);
    let x = Tensor::from_fn([h, w, c_in], |_| draw(&mut rng, coarse)).unwrap();
    let kernel = Tensor::from_fn([k, k, c_in, c_out], |_| draw(&mut rng, coarse)).unwrap();
    let with_bias = match kind {
        ConvKind::Standard => true,
        ConvKind::Tropical(_) => rng.random_bool(0.25),
    };
    let bias = with_bias.then(|| Tensor::from_fn([c_out], |_| draw(&mut rng, coarse)).unwrap());
    let params = ConvParams::new(kernel, stride, pad, bias).expect("generator respects layer constraints");
    ConvCase { kind, seed, x, params }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseFailure {
    pub case: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: Vec<CaseFailure>,
    /// Worst observed error where the suite measures one; 0 otherwise.
    pub worst_error: f64,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        SuiteReport {
            name,
            cases: 0,
            failures: Vec::new(),
            worst_error: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.cases > 0
    }

    fn fail(&mut self, case: impl ToString, reason: impl Into<String>) {
        self.failures.push(CaseFailure {
            case: case.to_string(),
            reason: reason.into(),
        });
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {}/{} cases passed",
            self.name,
            self.cases - self.failures.len().min(self.cases),
            self.cases
        )?;
        if self.worst_error > 0.0 {
            write!(f, " (worst error {:.3e})", self.worst_error)?;
        }
        for fail in self.failures.iter().take(10) {
            write!(f, "\n  FAIL {}: {}", fail.case, fail.reason)?;
        }
        if self.failures.len() > 10 {
            write!(f, "\n  ... {} more", self.failures.len() - 10)?;
        }
        Ok(())
    }
}

/// `cases` random cases cycling through every kind; `forward` must equal the
/// oracle bit for bit.
pub fn oracle_suite(cases: usize, seed: u64, forward: ForwardFn) -> SuiteReport {
    let kinds = all_kinds();
    let mut report = SuiteReport::new("oracle equivalence");
    for n in 0..cases {
        let case = random_case(kinds[n % kinds.len()], seed.wrapping_add(n as u64), CaseLimits::ORACLE);
        report.cases += 1;
        let expected = match oracle_forward(&case.x, &case.params, case.kind) {
            Ok(r) => r.output,
            Err(e) => {
                report.fail(&case, format!("oracle error: {e}"));
                continue;
            }
        };
        match forward(case.kind, &case.x, &case.params) {
            Err(e) => report.fail(&case, format!("forward error: {e}")),
            Ok(y) if y.dims() != expected.dims() => {
                report.fail(&case, format!("shape {} != oracle {}", y.shape(), expected.shape()))
            }
            Ok(y) => {
                let diff = y.data().iter().zip(expected.data()).position(|(a, b)| a.to_bits() != b.to_bits());
                if let Some(i) = diff {
                    report.fail(
                        &case,
                        format!("element {i}: {} != oracle {}", y.data()[i], expected.data()[i]),
                    );
                }
            }
        }
    }
    report
}

/// Draws cases from successive seeds until one has no near-ties.
fn tie_free_case(kind: ConvKind, seed: &mut u64) -> ConvCase {
    loop {
        let case = random_case(kind, *seed, CaseLimits::GRADIENT);
        *seed = seed.wrapping_add(1);
        match oracle_forward(&case.x, &case.params, kind) {
            Ok(r) if !kind.is_tropical() || r.min_gap >= TIE_TOLERANCE => return case,
            _ => continue,
        }
    }
}

/// Analytic conv gradients vs central differences for one case. Returns the
/// worst relative error over dX, dK and dBias.
pub fn check_conv_gradients(case: &ConvCase, dy_seed: u64) -> std::result::Result<f64, String> {
    let (y, cache) = conv_forward(case.kind, &case.x, &case.params).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(dy_seed);
    let dy = Tensor::from_fn(y.dims().to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap();
    let analytic = conv_backward(case.kind, &dy, &cache, &case.params).map_err(|e| e.to_string())?;
    let numeric = match oracle_grad(&case.x, &case.params, case.kind, &dy, GRAD_EPS, TIE_TOLERANCE) {
        Ok(n) => n,
        Err(OracleError::Tie { gap, .. }) => return Err(format!("unexpected near-tie (gap {gap:e})")),
        Err(e) => return Err(e.to_string()),
    };
    let mut worst = max_relative_error(&analytic.input, &numeric.input)
        .max(max_relative_error(&analytic.kernel, &numeric.kernel));
    match (&analytic.bias, &numeric.bias) {
        (Some(a), Some(n)) => worst = worst.max(max_relative_error(a, n)),
        (None, None) => {}
        _ => return Err("bias gradient presence differs".into()),
    }
    Ok(worst)
}

/// `per_kind` tie-free gradient cases for every tropical mode (first report),
/// and for standard conv and the dense layer (second report).
pub fn gradient_suite(per_kind: usize, seed: u64) -> [SuiteReport; 2] {
    let mut trop = SuiteReport::new("gradient check, tropical");
    let mut linear = SuiteReport::new("gradient check, standard conv and dense");
    let mut next_seed = seed;
    for kind in all_kinds() {
        let (report, tolerance) = if kind.is_tropical() {
            (&mut trop, TROPICAL_GRAD_TOLERANCE)
        } else {
            (&mut linear, LINEAR_GRAD_TOLERANCE)
        };
        for _ in 0..per_kind {
            let case = tie_free_case(kind, &mut next_seed);
            report.cases += 1;
            match check_conv_gradients(&case, case.seed ^ 0x5eed) {
                Ok(err) => {
                    report.worst_error = report.worst_error.max(err);
                    if err >= tolerance {
                        report.fail(&case, format!("relative error {err:.3e} >= {tolerance:e}"));
                    }
                }
                Err(e) => report.fail(&case, e),
            }
        }
    }
    for n in 0..per_kind {
        let case_seed = seed.wrapping_add(1_000_000 + n as u64);
        linear.cases += 1;
        let err = check_dense_gradients(case_seed);
        linear.worst_error = linear.worst_error.max(err);
        if err >= LINEAR_GRAD_TOLERANCE {
            linear.fail(
                format!("Dense seed={case_seed}"),
                format!("relative error {err:.3e} >= {LINEAR_GRAD_TOLERANCE:e}"),
            );
        }
    }
    [trop, linear]
}

pub fn check_dense_gradients(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_in = rng.random_range(1..=12);
    let n_out = rng.random_range(1..=6);
    let dense = Dense::new(
        Tensor::from_fn([n_out, n_in], |_| rng.random_range(-1.0..1.0)).unwrap(),
        Tensor::from_fn([n_out], |_| rng.random_range(-1.0..1.0)).unwrap(),
    )
    .unwrap();
    let x = Tensor::from_fn([n_in], |_| rng.random_range(-1.0..1.0)).unwrap();
    let dy = Tensor::from_fn([n_out], |_| rng.random_range(-1.0..1.0)).unwrap();
    let (_, cache) = dense.forward(&x).unwrap();
    let g = dense.backward(&dy, &cache).unwrap();
    let (dx, dw, db) = oracle_dense_grad(&dense, &x, &dy, GRAD_EPS);
    max_relative_error(&g.input, &dx)
        .max(max_relative_error(&g.weight, &dw))
        .max(max_relative_error(&g.bias, &db))
}

fn tropical(mode: TropicalMode, x: &Tensor, p: &ConvParams) -> Tensor {
    production_forward(ConvKind::Tropical(mode), x, p).expect("valid case")
}

fn neg(t: &Tensor) -> Tensor {
    t.map(|v| -v)
}

fn negated_params(p: &ConvParams) -> ConvParams {
    ConvParams::new(neg(p.kernel()), p.stride(), p.pad(), p.bias().map(neg)).unwrap()
}

/// Cases with identity or no padding and values on a 1/8 grid, so that every
/// sum below is exact.
fn dyadic_case(seed: u64) -> (Tensor, ConvParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.random_range(1..=6);
    let w = rng.random_range(1..=6);
    let c_in = rng.random_range(1..=3);
    let c_out = rng.random_range(1..=3);
    let k = rng.random_range(1..=h.min(w));
    let pad = if k > 1 && rng.random_bool(0.3) { PadSpec::identity(1) } else { PadSpec::NONE };
    let mut grid = || f64::from(rng.random_range(-16i32..=16)) / 8.0;
    let x = Tensor::from_fn([h, w, c_in], |_| grid()).unwrap();
    let kernel = Tensor::from_fn([k, k, c_in, c_out], |_| grid()).unwrap();
    let stride = if rng.random_bool(0.5) { 1 } else { 2 };
    (x, ConvParams::new(kernel, stride, pad, None).unwrap())
}

/// `MaxP-Max(X, K) = -MinP-Min(-X, -K)`, and the same for the other two
/// outer reductions.
pub fn duality_suite(cases: usize, seed: u64) -> SuiteReport {
    let pairs = [
        (TropicalMode::MAX_P_MAX, TropicalMode::MIN_P_MIN),
        (TropicalMode::MAX_P_MIN, TropicalMode::MIN_P_MAX),
        (TropicalMode::MAX_P_S, TropicalMode::MIN_P_S),
    ];
    let mut report = SuiteReport::new("duality");
    for n in 0..cases {
        let s = seed.wrapping_add(n as u64);
        let (x, p) = dyadic_case(s);
        for (a, b) in pairs {
            report.cases += 1;
            let lhs = tropical(a, &x, &p);
            let rhs = neg(&tropical(b, &neg(&x), &negated_params(&p)));
            if lhs != rhs {
                report.fail(format!("{} vs {} x={} seed={s}", a, b, x.shape()), "outputs differ");
            }
        }
    }
    report
}

/// Adding `c` to every kernel entry shifts outputs by `c` (min/max outer) or
/// `C_in * c` (sum outer).
pub fn kernel_shift_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("kernel shift");
    for n in 0..cases {
        let s = seed.wrapping_add(n as u64);
        let (x, p) = dyadic_case(s);
        let c = f64::from((s % 7) as i32 - 3) / 4.0;
        let shifted = ConvParams::new(p.kernel().map(|v| v + c), p.stride(), p.pad(), None).unwrap();
        for mode in TropicalMode::ALL {
            report.cases += 1;
            let expected_shift = match mode.outer {
                OuterOp::Sum => c * p.in_channels() as f64,
                OuterOp::Min | OuterOp::Max => c,
            };
            let base = tropical(mode, &x, &p);
            let moved = tropical(mode, &x, &shifted);
            if moved != base.map(|v| v + expected_shift) {
                report.fail(format!("{mode} x={} c={c} seed={s}", x.shape()), "shift is not exact");
            }
        }
    }
    report
}

/// Raising any single input entry never lowers any output entry.
pub fn monotonicity_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("monotonicity");
    for n in 0..cases {
        let s = seed.wrapping_add(n as u64);
        let case = random_case(ConvKind::Standard, s, CaseLimits::ORACLE);
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xabc);
        let mut raised = case.x.clone();
        let i = rng.random_range(0..raised.len());
        raised.data_mut()[i] += rng.random_range(0.0..2.0);
        let p = ConvParams::new(case.params.kernel().clone(), case.params.stride(), case.params.pad(), None).unwrap();
        for mode in TropicalMode::ALL {
            report.cases += 1;
            let before = tropical(mode, &case.x, &p);
            let after = tropical(mode, &raised, &p);
            if let Some(j) = before.data().iter().zip(after.data()).position(|(a, b)| b < a) {
                report.fail(
                    format!("{mode} x={} raised={i} seed={s}", case.x.shape()),
                    format!("output {j} fell from {} to {}", before.data()[j], after.data()[j]),
                );
            }
        }
    }
    report
}

/// For every mode, finds inputs with `F(X1 + X2) != F(X1) + F(X2)` within
/// `attempts` draws.
pub fn nonlinearity_suite(attempts: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("nonlinearity witness");
    for mode in TropicalMode::ALL {
        report.cases += 1;
        let found = (0..attempts).any(|n| {
            let s = seed.wrapping_add(n as u64);
            let (x1, p) = dyadic_case(s);
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x77);
            let x2 = Tensor::from_fn(x1.dims().to_vec(), |_| f64::from(rng.random_range(-16i32..=16)) / 8.0).unwrap();
            let sum_in = x1.zip_with(&x2, |a, b| a + b).unwrap();
            let lhs = tropical(mode, &sum_in, &p);
            let rhs = tropical(mode, &x1, &p).zip_with(&tropical(mode, &x2, &p), |a, b| a + b).unwrap();
            lhs != rhs
        });
        if !found {
            report.fail(mode, format!("no counterexample in {attempts} draws"));
        }
    }
    report
}

/// All algebraic identity suites.
pub fn property_suites(seed: u64) -> Vec<SuiteReport> {
    vec![
        duality_suite(200, seed),
        kernel_shift_suite(200, seed),
        monotonicity_suite(200, seed),
        nonlinearity_suite(100, seed),
    ]
}
