//! Pearson correlation, Student and Welch t-tests, Bonferroni thresholds and
//! the log-size scaling fit. p-values come from the regularized incomplete
//! beta function implemented here.

use serde::{Deserialize, Serialize};

use crate::corpus_io::{Cell, ReportTable};
use crate::error::{Error, Result};
use crate::num::{mean, var_sample, Real};

const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)]
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma<T: Real>(x: T) -> T {
    if x < T::lit(0.5) {
        // reflection: Γ(x)Γ(1-x) = π / sin(πx)
        let pi = T::PI();
        return (pi / (pi * x).sin()).ln() - ln_gamma(T::one() - x);
    }
    let x = x - T::one();
    let mut a = T::lit(LANCZOS[0]);
    let t = x + T::lit(LANCZOS_G + 0.5);
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a = a + T::lit(c) / (x + T::of_usize(i));
    }
    T::lit(0.5) * (T::lit(2.0) * T::PI()).ln() + (x + T::lit(0.5)) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf<T: Real>(a: T, b: T, x: T) -> T {
    let tiny = T::min_positive_value() / T::epsilon();
    let eps = T::epsilon();
    let one = T::one();
    let (qab, qap, qam) = (a + b, a + one, a - one);
    let mut c = one;
    let mut d = one - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = one / d;
    let mut h = d;
    for m in 1..=1000usize {
        let m = T::of_usize(m);
        let m2 = m + m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        h = h * d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        let del = d * c;
        h = h * del;
        if (del - one).abs() <= eps {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`, taking `y = 1 - x` separately so
/// callers that know it exactly lose no precision.
fn inc_beta_split<T: Real>(a: T, b: T, x: T, y: T) -> T {
    if x <= T::zero() {
        return T::zero();
    }
    if y <= T::zero() {
        return T::one();
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * y.ln();
    let front = ln_front.exp();
    if x < (a + T::one()) / (a + b + T::lit(2.0)) {
        front * beta_cf(a, b, x) / a
    } else {
        T::one() - front * beta_cf(b, a, y) / b
    }
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn inc_beta<T: Real>(a: T, b: T, x: T) -> Result<T> {
    if !(a > T::zero() && b > T::zero()) {
        return Err(Error::Invalid(format!("incomplete beta needs a, b > 0, got {a}, {b}")));
    }
    if !(x >= T::zero() && x <= T::one()) {
        return Err(Error::Invalid(format!("incomplete beta needs 0 <= x <= 1, got {x}")));
    }
    Ok(inc_beta_split(a, b, x, T::one() - x))
}

/// Two-sided tail probability `P(|T| >= |t|)` of Student's t with `df` degrees of freedom.
pub fn student_t_two_sided<T: Real>(t: T, df: T) -> T {
    if t.is_infinite() {
        return T::zero();
    }
    let t2 = t * t;
    let denom = df + t2;
    let p = inc_beta_split(df / T::lit(2.0), T::lit(0.5), df / denom, t2 / denom);
    p.max(T::zero()).min(T::one())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult<T> {
    pub r: T,
    pub p_two_sided: T,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestKind {
    IndependentWelch,
    Paired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestResult<T> {
    pub t: T,
    pub p_two_sided: T,
    pub df: T,
    pub kind: TTestKind,
}

fn pearson_r<T: Real>(x: &[T], y: &[T]) -> Result<T> {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    let mut syy = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(Error::Degenerate("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).max(-T::one()).min(T::one()))
}

/// Sample Pearson correlation with a two-sided p-value from the t transform
/// `t = r sqrt((n - 2) / (1 - r²))` on `n - 2` degrees of freedom.
pub fn pearson<T: Real>(x: &[T], y: &[T]) -> Result<CorrelationResult<T>> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} observations", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Invalid(format!("pearson needs at least 3 pairs, got {n}")));
    }
    let r = pearson_r(x, y)?;
    let df = T::of_usize(n - 2);
    let one_minus = T::one() - r * r;
    let p = if one_minus <= T::zero() {
        T::zero()
    } else {
        student_t_two_sided(r * (df / one_minus).sqrt(), df)
    };
    Ok(CorrelationResult { r, p_two_sided: p, n })
}

/// Paired t-test on `a - b`.
pub fn t_test_paired<T: Real>(a: &[T], b: &[T]) -> Result<TTestResult<T>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} paired observations", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Invalid("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let var = var_sample(&d);
    if var == T::zero() {
        return Err(Error::Degenerate("zero variance of the paired differences".into()));
    }
    let t = mean(&d) / (var / T::of_usize(n)).sqrt();
    let df = T::of_usize(n - 1);
    Ok(TTestResult { t, p_two_sided: student_t_two_sided(t, df), df, kind: TTestKind::Paired })
}

/// Independent two-sample t-test with Welch's unequal-variance correction.
pub fn t_test_independent<T: Real>(a: &[T], b: &[T]) -> Result<TTestResult<T>> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Invalid("independent t-test needs at least 2 observations per sample".into()));
    }
    let (na, nb) = (T::of_usize(a.len()), T::of_usize(b.len()));
    let (va, vb) = (var_sample(a) / na, var_sample(b) / nb);
    let se2 = va + vb;
    if se2 == T::zero() {
        return Err(Error::Degenerate("both samples have zero variance".into()));
    }
    let t = (mean(a) - mean(b)) / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - T::one()) + vb * vb / (nb - T::one()));
    Ok(TTestResult { t, p_two_sided: student_t_two_sided(t, df), df, kind: TTestKind::IndependentWelch })
}

/// Per-test significance level `alpha / n_tests`.
pub fn bonferroni(alpha: f64, n_tests: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Invalid(format!("alpha must be in (0, 1], got {alpha}")));
    }
    if n_tests == 0 {
        return Err(Error::Invalid("n_tests must be at least 1".into()));
    }
    Ok(alpha / n_tests as f64)
}

/// Score as a linear function of `log10(param_count)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingFit<T> {
    /// Score gained per tenfold increase in parameters.
    pub slope: T,
    pub intercept: T,
    pub r: T,
    /// `None` with fewer than three points.
    pub p_two_sided: Option<T>,
    pub points: Vec<(T, T)>,
}

pub fn scaling_fit<T: Real>(points: &[(T, T)]) -> Result<ScalingFit<T>> {
    if points.len() < 2 {
        return Err(Error::Invalid("scaling fit needs at least 2 points".into()));
    }
    if let Some((s, _)) = points.iter().find(|(s, _)| !(*s > T::zero() && s.is_finite())) {
        return Err(Error::Invalid(format!("parameter counts must be positive, got {s}")));
    }
    let x: Vec<T> = points.iter().map(|&(s, _)| s.log10()).collect();
    let y: Vec<T> = points.iter().map(|&(_, v)| v).collect();
    let (mx, my) = (mean(&x), mean(&y));
    let sxx: T = x.iter().map(|&a| (a - mx) * (a - mx)).sum();
    if sxx == T::zero() {
        return Err(Error::Degenerate("fewer than 2 distinct parameter counts".into()));
    }
    let sxy: T = x.iter().zip(&y).map(|(&a, &b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let (r, p) = if points.len() >= 3 {
        let c = pearson(&x, &y)?;
        (c.r, Some(c.p_two_sided))
    } else {
        (pearson_r(&x, &y)?, None)
    };
    Ok(ScalingFit { slope, intercept, r, p_two_sided: p, points: points.to_vec() })
}

pub fn scaling_predict<T: Real>(fit: &ScalingFit<T>, param_count: T) -> T {
    fit.intercept + fit.slope * param_count.log10()
}

/// One line of a significance table.
#[derive(Clone, Debug, PartialEq)]
pub struct StatRow {
    pub test_name: String,
    pub statistic: f64,
    pub p_value: Option<f64>,
    pub df: Option<f64>,
    pub n: usize,
    pub threshold: Option<f64>,
}

impl StatRow {
    pub fn significant(&self) -> Option<bool> {
        Some(self.p_value? < self.threshold?)
    }
}

pub const STATS_COLUMNS: [&str; 7] = ["test_name", "statistic", "p_value", "df", "n", "threshold", "significant"];

pub fn stats_table(rows: &[StatRow]) -> ReportTable {
    let mut t = ReportTable::new(STATS_COLUMNS);
    for r in rows {
        t.push(vec![
            Cell::from(r.test_name.as_str()),
            Cell::from(r.statistic),
            Cell::from(r.p_value),
            Cell::from(r.df),
            Cell::from(r.n),
            Cell::from(r.threshold),
            Cell::from(r.significant()),
        ]);
    }
    t
}
