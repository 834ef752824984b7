use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// max over coordinates of |analytic - numeric| / (|analytic| + 1e-8)
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `analytic` against central differences of `f` around `point`.
pub fn finite_difference_gradcheck<F>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<GradcheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    assert_eq!(point.len(), analytic.len(), "one analytic entry per coordinate");
    let mut x = point.to_vec();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x)?;
        x[i] = orig - step;
        let fm = f(&x)?;
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-8);
        if i == 0 || err > report.max_rel_err {
            report = GradcheckReport {
                max_rel_err: err,
                worst_index: i,
                analytic: analytic[i],
                numeric,
            };
        }
    }
    Ok(report)
}

/// Gradchecks a tape expression over all entries of its inputs.
///
/// `build` receives one parameter leaf per input tensor and must return a
/// single-element output.
pub fn gradcheck_expr<B>(inputs: &[Tensor], build: B, step: f64) -> Result<GradcheckReport>
where
    B: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor]| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out)?;
        let mut flat = Vec::new();
        for (v, t) in vars.iter().zip(ts) {
            match grads.get(*v) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat(0.0).take(t.numel())),
            }
        }
        Ok((tape.value(out).data()[0], flat))
    };
    let (_, analytic) = eval(inputs)?;
    let point: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let unflatten = |x: &[f64]| -> Vec<Tensor> {
        let mut off = 0;
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::from_parts(s.clone(), x[off..off + n].to_vec());
                off += n;
                t
            })
            .collect()
    };
    finite_difference_gradcheck(|x| Ok(eval(&unflatten(x))?.0), &point, &analytic, step)
}
