//! Central finite-difference verification of reverse-mode gradients.

use crate::engine::array::Array2;
use crate::error::Result;
use crate::scalar::Scalar;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Result of comparing analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Max over coordinates of `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compares `grad` against central differences of `value` around `params`.
///
/// `value` evaluates the scalar function; `grad` returns its reverse-mode
/// gradient with one array per parameter.
pub fn gradient_check<T, F, G>(params: &[Array2<T>], value: F, grad: G) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&[Array2<T>]) -> Result<T>,
    G: Fn(&[Array2<T>]) -> Result<Vec<Array2<T>>>,
{
    let analytic = grad(params)?;
    let h = T::of(FD_STEP);
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    let mut coords = 0;
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = value(&work)?;
            work[p].data_mut()[i] = orig - h;
            let minus = value(&work)?;
            work[p].data_mut()[i] = orig;
            let fd = ((plus - minus) / (h + h)).to_f64_lossy();
            let ad = analytic[p].data()[i].to_f64_lossy();
            let denom = 1.0f64.max(ad.abs()).max(fd.abs());
            worst = worst.max((ad - fd).abs() / denom);
            coords += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coordinates: coords,
    })
}

/// Gradient check for a function built on a fresh [`crate::engine::Tape`].
///
/// `build` records the computation for the given leaves and returns the loss node.
pub fn check_tape_fn<T, B>(params: &[Array2<T>], build: B) -> Result<GradCheck>
where
    T: Scalar,
    B: Fn(&mut crate::engine::Tape<T>, &[crate::engine::Var]) -> Result<crate::engine::Var>,
{
    let run = |ps: &[Array2<T>]| -> Result<(crate::engine::Tape<T>, Vec<crate::engine::Var>, crate::engine::Var)> {
        let mut tape = crate::engine::Tape::new();
        let leaves: Vec<_> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = build(&mut tape, &leaves)?;
        Ok((tape, leaves, loss))
    };
    gradient_check(
        params,
        |ps| {
            let (tape, _, loss) = run(ps)?;
            Ok(tape.value(loss).item())
        },
        |ps| {
            let (tape, leaves, loss) = run(ps)?;
            let g = tape.backward(loss)?;
            Ok(leaves.iter().map(|&l| g.get(l)).collect())
        },
    )
}
