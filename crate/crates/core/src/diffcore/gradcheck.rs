use super::tensor::{backward, reset_tape, Tensor};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so that near-zero gradients
/// are judged on an absolute scale of this size.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compare `backward()` gradients of a scalar function with central differences.
///
/// `f` is evaluated once on tracked leaves built from `point`, then twice per
/// coordinate on untracked constants. The current tape is reset. The check
/// passes when the max relative error `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`
/// is strictly below `tolerance`.
pub fn finite_diff_check<F>(f: F, point: &[(Vec<f64>, Vec<usize>)], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    reset_tape();
    let leaves: Vec<Tensor> = point
        .iter()
        .map(|(data, shape)| Tensor::param(data.clone(), shape))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    if !loss.item().is_finite() {
        return Err(Error::Domain { op: "finite_diff_check", index: 0, value: loss.item() });
    }
    let grads = backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| grads.get(l)).collect();
    reset_tape();

    let eval = |inputs: &[Vec<f64>]| -> Result<f64> {
        let ts: Vec<Tensor> = inputs
            .iter()
            .zip(point)
            .map(|(d, (_, shape))| Tensor::new(d.clone(), shape))
            .collect::<Result<_>>()?;
        Ok(f(&ts)?.item())
    };

    let mut values: Vec<Vec<f64>> = point.iter().map(|(d, _)| d.clone()).collect();
    let mut numeric = Vec::with_capacity(point.len());
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    let mut flat_index = 0;
    for i in 0..values.len() {
        let mut num_i = Vec::with_capacity(values[i].len());
        for j in 0..values[i].len() {
            let orig = values[i][j];
            values[i][j] = orig + FD_STEP;
            let up = eval(&values)?;
            values[i][j] = orig - FD_STEP;
            let down = eval(&values)?;
            values[i][j] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Domain { op: "finite_diff_check", index: flat_index, value: orig });
            }
            let n = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i][j];
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR);
            if worst.is_none() || rel > max_rel_error {
                max_rel_error = rel;
                worst = Some((i, j));
            }
            num_i.push(n);
            flat_index += 1;
        }
        numeric.push(num_i);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_passes() {
        let r = finite_diff_check(|x| x[0].square()?.sum(), &[(vec![3.0], vec![])], 1e-4).unwrap();
        assert!((r.analytic[0][0] - 6.0).abs() < 1e-12);
        assert!((r.numeric[0][0] - 6.0).abs() < 1e-7);
        assert!(r.passed);
    }

    #[test]
    fn zero_tolerance_fails() {
        let r = finite_diff_check(|x| x[0].exp()?.sum(), &[(vec![0.3, -1.2], vec![2])], 0.0).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn nonfinite_neighbourhood_is_domain_error() {
        // log is undefined just left of zero
        let r = finite_diff_check(|x| x[0].log()?.sum(), &[(vec![1e-7], vec![])], 1e-4);
        assert!(matches!(r, Err(Error::Domain { .. })));
    }

    #[test]
    fn softplus_of_dot_product() {
        let w = vec![0.3, -0.8, 1.1, 0.05];
        let x = vec![-0.4, 0.9, 0.2, -1.7];
        let r = finite_diff_check(
            |t| t[0].mul(&t[1])?.sum()?.softplus(),
            &[(w, vec![4]), (x, vec![4])],
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "max rel error {}", r.max_rel_error);
    }
}
