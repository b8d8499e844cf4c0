//! Central finite-difference check of tape gradients (64-bit).

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// max over checked coordinates of |autodiff - fd| / (|fd| + 1e-12)
    pub max_rel_error: f64,
    /// coordinate where the max was attained
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// coordinates whose perturbation changed a select mask, an extremal
    /// index, a clamp or a relu pattern
    pub skipped: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }
}

fn eval<F>(f: &F, x: &Tensor<f64>) -> Result<(f64, Vec<u64>)>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    Ok((tape.item(out), tape.decisions().to_vec()))
}

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// `f` must build its scalar output on the given tape from the given input
/// handle and must be deterministic.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    let base = tape.decisions().to_vec();
    let grads = tape.backward(out)?;
    let ad = grads.get(v).expect("input is a grad leaf").data().to_vec();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (fp, dp) = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let (fm, dm) = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        if dp != base || dm != base {
            report.skipped += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * eps);
        let err = (ad[i] - fd).abs() / (fd.abs() + 1e-12);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    #[test]
    fn sum_is_exact() {
        let x = random(&[2, 3, 2], 1, -2.0, 2.0);
        let r = finite_diff_check(|t, v| t.sum(v), &x, 1e-4).unwrap();
        assert_eq!(r.checked, 12);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn mse_against_constant() {
        let x = random(&[3, 3, 3], 2, -1.0, 1.0);
        let target = random(&[3, 3, 3], 3, -1.0, 1.0);
        let r = finite_diff_check(
            |t, v| {
                let c = t.constant(target.clone());
                t.mse(v, c)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn kinks_are_excluded() {
        // relu at exactly 0 flips pattern under +eps
        let x = Tensor::new(&[3], vec![0.0, 1.0, -1.0]).unwrap();
        let r = finite_diff_check(
            |t, v| {
                let r = t.relu(v)?;
                t.sum(r)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-9);
    }
}
