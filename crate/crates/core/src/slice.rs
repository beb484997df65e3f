//! Univariate slice sampler with stepping out and shrinkage (Neal, 2003).

use rand::Rng;

/// One slice-sampling transition from `x0` for the unnormalized log density
/// `log_f`.
///
/// `width` is the initial bracket size; stepping out is capped at
/// `max_steps` expansions, after which the bracket shrinks until a point is
/// accepted. Terminates because the bracket contains `x0`, which is always
/// on the slice.
pub fn slice_sample<F, R>(x0: f64, mut log_f: F, width: f64, max_steps: usize, rng: &mut R) -> f64
where
    F: FnMut(f64) -> f64,
    R: Rng + ?Sized,
{
    let level = log_f(x0) + rng.random::<f64>().ln();

    let mut left = x0 - width * rng.random::<f64>();
    let mut right = left + width;
    let mut j = (max_steps as f64 * rng.random::<f64>()).floor() as usize;
    let mut k = max_steps.saturating_sub(1).saturating_sub(j);
    while j > 0 && log_f(left) > level {
        left -= width;
        j -= 1;
    }
    while k > 0 && log_f(right) > level {
        right += width;
        k -= 1;
    }

    loop {
        let x1 = left + rng.random::<f64>() * (right - left);
        if log_f(x1) > level {
            return x1;
        }
        if x1 < x0 {
            left = x1;
        } else {
            right = x1;
        }
        if right - left < 1e-14 * (1.0 + x0.abs()) {
            return x0;
        }
    }
}
