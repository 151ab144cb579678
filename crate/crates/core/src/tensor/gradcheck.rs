use super::{OpKind, Tape, Tensor, Var};
use crate::error::Result;

/// `|ad − fd| / max(1e-8, |ad| + |fd|)`.
pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8)
}

/// Compare the reverse-mode gradient of the scalar `f(x)` against central
/// differences `(f(x + h·e) − f(x − h·e)) / 2h`, coordinate by coordinate.
/// Returns the largest [`relative_error`].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_with_fault(f, x, h, None)
}

/// [`grad_check`] with an optional deliberately corrupted adjoint.
pub fn grad_check_with_fault<F>(f: F, x: &Tensor, h: f64, fault: Option<OpKind>) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let v = tape.variable(x);
    let y = f(&mut tape, v)?;
    let grads = tape.backward(y)?;
    let ad = grads
        .wrt(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let y = f(&mut tape, v)?;
        tape.item(y)
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for (i, &a) in ad.iter().enumerate() {
        let x0 = probe.data()[i];
        probe.data_mut()[i] = x0 + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = x0;
        worst = worst.max(relative_error(a, (plus - minus) / (2.0 * h)));
    }
    Ok(worst)
}

/// One probed coordinate of a sampled check.
#[derive(Clone, Debug)]
pub struct SampledCheck {
    pub tensor: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Central-difference check of selected coordinates of a parameter list.
///
/// `analytic[t]` is the reverse-mode gradient of tensor `t`; `eval`
/// recomputes the scalar objective from scratch for perturbed parameters.
pub fn sampled_grad_check<F>(
    params: &mut [Tensor],
    analytic: &[Vec<f64>],
    samples: &[(usize, usize)],
    h: f64,
    mut eval: F,
) -> Result<Vec<SampledCheck>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut out = Vec::with_capacity(samples.len());
    for &(t, i) in samples {
        let x0 = params[t].data()[i];
        params[t].data_mut()[i] = x0 + h;
        let plus = eval(params);
        params[t].data_mut()[i] = x0 - h;
        let minus = eval(params);
        params[t].data_mut()[i] = x0;
        let numeric = (plus? - minus?) / (2.0 * h);
        let ad = analytic[t][i];
        out.push(SampledCheck {
            tensor: t,
            coord: i,
            analytic: ad,
            numeric,
            rel_error: relative_error(ad, numeric),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                Ok(tape.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn corrupted_adjoint_is_detected() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let f = |tape: &mut Tape, v: Var| {
            let sq = tape.mul(v, v)?;
            Ok(tape.sum(sq))
        };
        let err = grad_check_with_fault(f, &x, 1e-5, Some(OpKind::Mul)).unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 2.1).abs() < 1e-15);
    }
}
