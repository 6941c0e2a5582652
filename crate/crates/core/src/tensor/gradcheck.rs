use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for [`relative_error`]; below it the comparison is absolute.
const REL_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input number, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the reverse-mode gradient of a scalar function against
/// `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(point), h, None)
}

/// Multi-input variant. With `per_input = Some(k)` only `k` evenly spaced
/// coordinates of each input are perturbed.
pub fn grad_check_many<F>(f: F, points: &[Tensor], h: f64, per_input: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, p) in points.iter().enumerate() {
        for idx in coordinates(p.numel(), per_input) {
            let orig = p.data()[idx];
            work[pi].data_mut()[idx] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[idx] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[idx];
            let err = relative_error(a, numeric);
            if !err.is_finite() {
                return Err(Error::NonFinite(format!("grad_check coordinate ({pi}, {idx})")));
            }
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (pi, idx);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::NonScalarBackward(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

fn coordinates(n: usize, per_input: Option<usize>) -> Vec<usize> {
    match per_input {
        Some(k) if k < n => (0..k).map(|i| (i * n) / k + (n / k) / 2).collect(),
        _ => (0..n).collect(),
    }
}
